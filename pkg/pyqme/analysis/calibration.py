"""
In-silico calibration runs: Rabi frequency vs drive amplitude, and the
Ramsey photon-number calibration from measurement-induced dephasing.

Pi/2 pulses are ideal instantaneous rotations; the high-power readout is
replaced by reading populations off the final state.
"""

import math
import logging
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import polars as pl
from scipy.integrate import trapezoid

from pyqme.errors import FitError, ConfigurationError
from pyqme.analysis.fitcore import (
    FitResult,
    fit_exponential,
    fit_gaussian_centered,
    fit_line,
    fit_sinusoid,
)
from pyqme.sim.hilbert import (
    DensityMatrix,
    partial_trace_qubit,
    product_state,
    qubit_rotation,
    rotation,
)
from pyqme.sim.lindblad import StateTrajectory, evolve
from pyqme.sim.model import PulseSchedule, SystemModel, TWO_PI
from pyqme.sim.utils import progress_iter

logger = logging.getLogger(__name__)

DEFAULT_N_PHASES = 16
COHERENCE_FLOOR = 1e-9
RABI_DURATION = 2e-6
RABI_SAMPLE_EVERY = 5

# first pi/2 pulse phase preparing |+> or |-> from |g>
_PREPARATION_PHASE = {"+": -0.5 * math.pi, "-": 0.5 * math.pi}

CALIBRATION_SCHEMA = {
    "amplitude": pl.Float64,
    "omega_hz": pl.Float64,
    "coherence": pl.Float64,
    "n_extracted": pl.Float64,
    "n_emitted": pl.Float64,
    "excluded": pl.Boolean,
    "fit_model": pl.Utf8,
    "fit_params": pl.Utf8,
}


class CalibrationCurve(NamedTuple):
    kind: str
    abscissa: np.ndarray
    ordinate: np.ndarray
    fit: FitResult
    n_extracted: Optional[np.ndarray] = None
    n_emitted: Optional[np.ndarray] = None
    excluded: Optional[np.ndarray] = None

    def validate(self) -> "CalibrationCurve":
        if np.any(np.diff(self.abscissa) <= 0):
            raise ConfigurationError("calibration abscissa must be strictly increasing")
        if self.kind == "ramsey":
            ok = ~self.excluded
            if np.any(self.ordinate[ok] < -1e-9) or np.any(self.ordinate[ok] > 1 + 1e-6):
                raise ValueError("coherence outside [0, 1]")
        return self

    def to_frame(self) -> pl.DataFrame:
        n = self.abscissa.shape[0]
        nan = np.full(n, np.nan)
        params = ";".join(f"{k}={v:.10g}" for k, v in self.fit.as_dict().items())
        rabi = self.kind == "rabi"
        return pl.DataFrame(
            {
                "amplitude": self.abscissa,
                "omega_hz": self.ordinate if rabi else nan,
                "coherence": nan if rabi else self.ordinate,
                "n_extracted": nan if self.n_extracted is None else self.n_extracted,
                "n_emitted": nan if self.n_emitted is None else self.n_emitted,
                "excluded": np.zeros(n, dtype=bool) if self.excluded is None else self.excluded,
                "fit_model": [self.fit.model_name] * n,
                "fit_params": [params] * n,
            },
            schema=CALIBRATION_SCHEMA,
        )

    def write_csv(self, file_path: Union[str, Path]) -> None:
        self.to_frame().write_csv(Path(file_path))


def _sorted_amplitudes(amplitudes: Sequence[float]) -> np.ndarray:
    amps = np.asarray(amplitudes, dtype=np.float64)
    if amps.size == 0:
        raise ConfigurationError("amplitude list is empty")
    if np.any(amps < 0):
        raise ConfigurationError("amplitudes must be >= 0")
    if np.any(np.diff(amps) <= 0):
        raise ConfigurationError("amplitudes must be strictly increasing")
    return amps


def rabi_model(n_max: int = 1) -> SystemModel:
    """Qubit-only calibration model: no probe, no intrinsic decoherence."""
    schedule = PulseSchedule(0.0, RABI_DURATION, 0.0, 0.0, RABI_DURATION)
    return SystemModel.create(0.0, n_max=n_max, schedule=schedule, decoherence_enabled=False)


def rabi_calibration(
    amplitude_list: Sequence[float],
    model: Optional[SystemModel] = None,
    omega_per_amplitude: float = TWO_PI * 1e6,
    dt: float = 1e-9,
    progress=None,
) -> CalibrationCurve:
    """
    Drive the qubit from |g> at Omega = amplitude * omega_per_amplitude, fit a
    sinusoid to the excited population and a line to the fitted frequencies.
    """
    amps = _sorted_amplitudes(amplitude_list)
    if model is None:
        model = rabi_model()
    model = model.with_updates(epsilon=0.0)
    rho0 = product_state(model.spec, "g", 0)
    freqs = np.empty_like(amps)
    for i, amp in enumerate(progress_iter(amps, progress=progress, desc="rabi")):
        m = model.with_updates(omega=float(amp) * omega_per_amplitude)
        traj = evolve(m, rho0, dt=dt, store_stride=0)
        t = traj.fine_times[::RABI_SAMPLE_EVERY]
        p_e = 0.5 * (1.0 + traj.observables["sz_exp"].to_numpy()[::RABI_SAMPLE_EVERY])
        try:
            fit = fit_sinusoid(t, p_e)
        except FitError as e:
            raise FitError(f"Rabi fit failed at amplitude index {i}: {e}") from e
        if "degenerate" in fit.flags:
            logger.warning(f"amplitude {amp:g}: flat population, frequency set to 0")
        freqs[i] = abs(fit.value("frequency"))
    line = fit_line(amps, freqs, intercept=True)
    logger.info(
        f"Rabi slope {line.value('slope') / 1e6:.6g} MHz per amplitude unit, "
        f"intercept {line.value('intercept') / 1e6:.3g} MHz"
    )
    return CalibrationCurve("rabi", amps, freqs, line).validate()


def _ramsey_phases(n_phases: int) -> np.ndarray:
    if n_phases < 8:
        raise ConfigurationError(f"Ramsey phase sweep needs >= 8 phases, got {n_phases}")
    return TWO_PI * np.arange(n_phases) / n_phases


def fringe_populations(final_state: Union[DensityMatrix, np.ndarray], n_phases: int = DEFAULT_N_PHASES):
    """Excited population after a final pi/2 pulse of phase phi, for n_phases uniform phases."""
    rho = partial_trace_qubit(final_state).matrix
    phases = _ramsey_phases(n_phases)
    pops = np.empty(n_phases)
    for k, phi in enumerate(phases):
        u = qubit_rotation(0.5 * math.pi, phi)
        pops[k] = (u @ rho @ u.conj().T)[1, 1].real
    return phases, pops


def fringe_amplitude(final_state: Union[DensityMatrix, np.ndarray], n_phases: int = DEFAULT_N_PHASES) -> float:
    """Ramsey fringe amplitude; equals |rho_ge| of the reduced qubit state."""
    phases, pops = fringe_populations(final_state, n_phases)
    fit = fit_sinusoid(phases / TWO_PI, pops)
    if "degenerate" in fit.flags:
        return 0.0
    return abs(fit.value("amplitude"))


def _ramsey_run(
    model: SystemModel, preparation: str, n_phases: int, dt: float
) -> Tuple[float, StateTrajectory]:
    try:
        phi = _PREPARATION_PHASE[preparation]
    except KeyError:
        raise ValueError(
            f"Unknown preparation: {preparation}. Supported: {', '.join(_PREPARATION_PHASE)}"
        ) from None
    u = rotation(model.spec, 0.5 * math.pi, phi)
    ground = product_state(model.spec, "g", 0).matrix
    rho0 = u @ ground @ u.conj().T
    traj = evolve(model, rho0, dt=dt, store_stride=0)
    return fringe_amplitude(traj.final_state, n_phases), traj


def ramsey_coherence_with_drive(
    model: SystemModel,
    probe_on: bool,
    preparation: str = "+",
    n_phases: int = DEFAULT_N_PHASES,
    dt: float = 1e-9,
) -> float:
    """Fringe amplitude after the scheduled drive, with or without the cavity probe."""
    m = model if probe_on else model.with_updates(epsilon=0.0)
    amplitude, _ = _ramsey_run(m, preparation, n_phases, dt)
    return amplitude


def ramsey_photon_calibration(
    probe_amplitude_list: Sequence[float],
    model: Optional[SystemModel] = None,
    epsilon_per_amplitude: float = TWO_PI * 1e6,
    n_phases: int = DEFAULT_N_PHASES,
    dt: float = 1e-9,
    progress=None,
) -> CalibrationCurve:
    """
    Ramsey sequence pi/2 - probe - phase-swept pi/2 at Omega = 0. The
    coherence normalized to the unprobed run gives N = -ln(coherence) / 2.
    """
    amps = _sorted_amplitudes(probe_amplitude_list)
    if model is None:
        model = SystemModel.create(0.0, n_target=4.0)
    model = model.with_updates(omega=0.0)

    ref, _ = _ramsey_run(model.with_updates(epsilon=0.0), "+", n_phases, dt)
    if ref <= COHERENCE_FLOOR:
        raise FitError("unprobed Ramsey fringe has no contrast")

    coherence = np.empty_like(amps)
    n_emitted = np.empty_like(amps)
    for i, amp in enumerate(progress_iter(amps, progress=progress, desc="ramsey")):
        m = model.with_updates(epsilon=float(amp) * epsilon_per_amplitude)
        a_on, traj = _ramsey_run(m, "+", n_phases, dt)
        coherence[i] = a_on / ref
        n_emitted[i] = m.kappa_b * trapezoid(traj.photon_number, traj.fine_times)

    excluded = coherence <= COHERENCE_FLOOR
    if np.any(excluded):
        logger.warning(f"{int(np.sum(excluded))} Ramsey points below the coherence floor excluded")
    n_extracted = np.full_like(amps, np.nan)
    n_extracted[~excluded] = -0.5 * np.log(coherence[~excluded])

    fit = fit_gaussian_centered(amps[~excluded], coherence[~excluded])
    sigma = fit.value("sigma")
    logger.info(f"Ramsey calibration: N = {1.0 / (4.0 * sigma**2):.6g} * amplitude^2")
    return CalibrationCurve("ramsey", amps, coherence, fit, n_extracted, n_emitted, excluded).validate()


def photons_from_fit(curve: CalibrationCurve, amplitude: float) -> float:
    """N(amplitude) on the fitted Gaussian, -ln(g(amp)/g(0)) / 2 = amp^2 / (4 sigma^2)."""
    if curve.kind != "ramsey":
        raise ValueError("photon numbers come from a Ramsey calibration curve")
    return amplitude**2 / (4.0 * curve.fit.value("sigma") ** 2)


class RingdownFit(NamedTuple):
    kappa: float
    fit: FitResult


def cavity_ringdown(model: SystemModel, dt: float = 1e-9) -> RingdownFit:
    """Recover kappa from the free decay of <n> after the probe pulse."""
    if model.epsilon == 0:
        raise ConfigurationError("ring-down needs a non-zero probe amplitude")
    m = model.with_updates(omega=0.0)
    traj = evolve(m, product_state(m.spec, "g", 0), dt=dt, store_stride=0)
    t = traj.fine_times
    after = t >= m.schedule.probe_end
    if np.count_nonzero(after) < 3:
        raise FitError("record ends before the cavity can ring down")
    fit = fit_exponential(t[after] - m.schedule.probe_end, traj.photon_number[after])
    return RingdownFit(fit.value("rate"), fit)
