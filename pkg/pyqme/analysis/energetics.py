"""
Energy ledger of the measurement: energy released by the qubit against the
energy carried off by the probe photons.

Sign convention: every term is oriented by the initial <sigma_x> of its
preparation (+1 for |+>, -1 for |->), so that qubit loss and photon gain
are both positive. Energies are in Hz * photons.

    residual = dE_qubit - [(kappa/kappa_B) * dE_photon_trans + dE_cross]

The drive-induced decoupling seen in experiments is outside the master
equation and is not modeled.
"""

import math
import logging
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import polars as pl
from scipy.integrate import trapezoid

from pyqme.errors import ConfigurationError, EnergyBalanceError, FitError, NyquistError
from pyqme.analysis.calibration import fringe_amplitude, ramsey_coherence_with_drive
from pyqme.analysis.spectrum import (
    PowerSpectrum,
    fit_triplet,
    frequency_grid,
    simulate_spectrum,
    spectrum_moments,
)
from pyqme.sim.lindblad import StateTrajectory, evolve
from pyqme.sim.model import SystemModel, TWO_PI, system_hamiltonian
from pyqme.sim.hilbert import product_state
from pyqme.sim.utils import finite_window_transform, progress_iter, trapezoid_weights

logger = logging.getLogger(__name__)

RINGDOWN_TAIL_TOL = 1e-3
IDEAL_RESIDUAL_FRACTION = 0.02
CROSS_F_SPAN = 50e6
CROSS_N_POINTS = 4001
# full Nyquist band of the default 25 ns correlator grid
LEDGER_F_SPAN = 20e6
LEDGER_N_POINTS = 801

ORIENTATION = {"+": 1.0, "-": -1.0}

LEDGER_SCHEMA = {
    "omega_hz": pl.Float64,
    "n_ref": pl.Float64,
    "dE_qubit": pl.Float64,
    "dE_photon_trans": pl.Float64,
    "dE_cross": pl.Float64,
    "residual": pl.Float64,
    "mode": pl.Utf8,
}

PREPARATION_SCHEMA = {
    "omega_hz": pl.Float64,
    "n_ref": pl.Float64,
    "preparation": pl.Utf8,
    "n_total": pl.Float64,
    "mean_shift_hz": pl.Float64,
    "triplet_mean_hz": pl.Float64,
    "released_exact": pl.Float64,
    "released_direct": pl.Float64,
    "released_ramsey": pl.Float64,
    "cross_spectral": pl.Float64,
    "cross_exact": pl.Float64,
    "within_bound": pl.Boolean,
}


def _orientation(label: str) -> float:
    try:
        return ORIENTATION[label]
    except KeyError:
        raise ValueError(
            f"Unknown preparation: {label}. Supported: {', '.join(ORIENTATION)}"
        ) from None


def emitted_photons(traj: StateTrajectory, kappa_port: float) -> float:
    """kappa_port * integral of <n(t)> over the record (trapezoidal, fine grid)."""
    n = traj.photon_number
    t = traj.fine_times
    peak = float(np.max(n)) if n.size else 0.0
    if peak > 0 and n[-1] > RINGDOWN_TAIL_TOL * peak:
        logger.warning(
            f"incomplete ring-down: <n> at the end of the record is {n[-1] / peak:.2e} of its peak"
        )
    return float(kappa_port * trapezoid(n, t))


def system_energy_change(traj: StateTrajectory) -> float:
    """Tr[H_S (rho_final - rho_initial)] in Hz * photons."""
    h = system_hamiltonian(traj.model).matrix
    d_rho = traj.final_state.matrix - traj.initial_state.matrix
    return float(np.sum(h.T * d_rho).real) / TWO_PI


def _sigma_x_change(traj: StateTrajectory) -> float:
    sx = traj.observables["sx_exp"].to_numpy()
    return float(sx[0] - sx[-1])


# ---------------------------------------------------------------------------
# Qubit side
# ---------------------------------------------------------------------------


class QubitEnergyChange(NamedTuple):
    ramsey: float
    direct: float
    exact: float
    per_preparation: Tuple[Tuple[str, float, float, float], ...] = ()


def qubit_energy_change(
    model: SystemModel,
    schedule=None,
    preparations: Sequence[str] = ("+", "-"),
    dt: float = 1e-9,
    n_phases: int = 16,
) -> QubitEnergyChange:
    """
    Oriented qubit energy released, by three estimators:

    ramsey: sum_p (Omega/2) (1 - A_on/A_off) from the Ramsey fringe amplitudes
    direct: sum_p sigma_p (Omega/2) (<sx>_initial - <sx>_final)
    exact:  -sum_p sigma_p Tr[H_S (rho_f - rho_i)]
    """
    if schedule is not None:
        model = model.with_updates(schedule=schedule)
    rows = []
    for label in preparations:
        sign = _orientation(label)
        traj = evolve(model, product_state(model.spec, label, 0), dt=dt, store_stride=0)
        a_on = fringe_amplitude(traj.final_state, n_phases)
        a_off = ramsey_coherence_with_drive(model, False, label, n_phases, dt)
        half = 0.5 * model.omega / TWO_PI
        ramsey = half * (1.0 - a_on / a_off) if a_off > 0 else math.nan
        direct = sign * half * _sigma_x_change(traj)
        exact = -sign * system_energy_change(traj)
        rows.append((label, ramsey, direct, exact))
    return QubitEnergyChange(
        sum(r[1] for r in rows), sum(r[2] for r in rows), sum(r[3] for r in rows), tuple(rows)
    )


# ---------------------------------------------------------------------------
# Photon side
# ---------------------------------------------------------------------------


class PhotonEnergyChange(NamedTuple):
    moment: float
    triplet: float
    per_preparation: Tuple[Tuple[str, float, float, float], ...] = ()


def photon_energy_change(
    s_plus: PowerSpectrum,
    s_minus: PowerSpectrum,
    output_fraction: float = 1.0,
    omega_hint: Optional[float] = None,
) -> PhotonEnergyChange:
    """
    Oriented photon energy gain, sum_p sigma_p * N_p * <f>_p, from spectral
    moments and, when ``omega_hint`` is given, from the triplet fit.
    ``output_fraction`` (kappa_B/kappa) turns total emission into transmitted.
    """
    if not np.array_equal(s_plus.freqs_hz, s_minus.freqs_hz):
        raise ValueError("spectra are on different frequency grids")
    if s_plus.kappa != s_minus.kappa or s_plus.tau != s_minus.tau:
        raise ValueError("spectra come from different probe settings")
    rows = []
    moment_total = 0.0
    triplet_total = 0.0 if omega_hint else math.nan
    for label, s in (("+", s_plus), ("-", s_minus)):
        sign = _orientation(label)
        moments = spectrum_moments(s)
        e_moment = sign * output_fraction * moments.n_total * moments.mean_shift
        moment_total += e_moment
        e_triplet = math.nan
        if omega_hint:
            triplet = fit_triplet(s, omega_hint)
            e_triplet = sign * output_fraction * triplet.total_area * triplet.mean_center
            triplet_total += e_triplet
        rows.append((label, moments.n_total, e_moment, e_triplet))
    return PhotonEnergyChange(moment_total, triplet_total, tuple(rows))


def _probe_transform(model: SystemModel, omegas: np.ndarray) -> np.ndarray:
    """F[eps](w) = (2 pi)^-1/2 int eps(t) e^{i w t} dt for the square probe pulse."""
    sched = model.schedule
    t0, t1 = sched.probe_start, sched.probe_end
    out = np.empty(omegas.shape, dtype=np.complex128)
    small = np.abs(omegas) * (t1 - t0) < 1e-8
    w = omegas[~small]
    out[~small] = (np.exp(1j * w * t1) - np.exp(1j * w * t0)) / (1j * w)
    out[small] = t1 - t0
    return model.epsilon * out / math.sqrt(TWO_PI)


def input_field_spectrum(model: SystemModel, freqs_hz: np.ndarray) -> np.ndarray:
    """alpha_p(w) of the input pulse, alpha_in = i eps / sqrt(kappa_A)."""
    if model.kappa_a <= 0:
        raise ConfigurationError("input field is undefined for kappa_A = 0")
    return 1j * _probe_transform(model, TWO_PI * np.asarray(freqs_hz)) / math.sqrt(model.kappa_a)


def reflected_cross_term(
    model: SystemModel,
    traj: StateTrajectory,
    freqs_hz: Optional[np.ndarray] = None,
) -> float:
    """
    Interference of the reflected probe with the cavity emission,
    int dw w 2 sqrt(kappa_A) Re{alpha_p(w) conj(F[<a>](w))}, in Hz * photons.

    sqrt(kappa_A) alpha_p = i F[eps], so at fixed eps the port split drops out.
    """
    if model.epsilon == 0:
        return 0.0
    if freqs_hz is None:
        freqs_hz = frequency_grid(CROSS_F_SPAN, CROSS_N_POINTS)
    freqs_hz = np.asarray(freqs_hz, dtype=np.float64)
    if 2.0 * float(np.max(np.abs(freqs_hz))) * traj.dt > 1.0 + 1e-9:
        raise NyquistError(
            f"cross-term axis exceeds the Nyquist band of dt = {traj.dt * 1e9:.3g} ns"
        )
    t = traj.fine_times
    omegas = TWO_PI * freqs_hz
    field = finite_window_transform(
        t, trapezoid_weights(t.shape[0], traj.dt), traj.cavity_field.astype(np.complex128), omegas
    )
    alpha_p = input_field_spectrum(model, freqs_hz)
    density = 2.0 * np.real(math.sqrt(model.kappa_a) * alpha_p * np.conj(field))
    # int dw w D(w) / 2pi, with dw = 2 pi df
    return float(trapezoid(omegas * density, freqs_hz))


def reflected_cross_term_exact(model: SystemModel, traj: StateTrajectory) -> float:
    """2 Re[eps* (<a>(t_end) - <a>(t_start))] for the square probe, in Hz * photons."""
    if model.epsilon == 0:
        return 0.0
    sched = model.schedule
    t = traj.fine_times
    field = traj.cavity_field
    i0 = int(np.argmin(np.abs(t - sched.probe_start)))
    i1 = int(np.argmin(np.abs(t - sched.probe_end)))
    delta = field[i1] - field[i0]
    return float(2.0 * np.real(np.conj(model.epsilon) * delta)) / TWO_PI


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------


class PreparationEnergy(NamedTuple):
    preparation: str
    n_total: float
    mean_shift: float
    triplet_mean: float
    released_exact: float
    released_direct: float
    released_ramsey: float
    cross_spectral: float
    cross_exact: float
    within_bound: bool = True


class EnergyLedger(NamedTuple):
    omega_hz: float
    n_ref: float
    dE_qubit: float
    dE_qubit_direct: float
    dE_qubit_ramsey: float
    dE_photon_trans: float
    dE_photon_trans_triplet: float
    dE_cross: float
    dE_cross_exact: float
    residual: float
    mode: str
    port_factor: float
    preparations: Tuple[PreparationEnergy, ...] = ()
    spectra: Tuple[PowerSpectrum, ...] = ()

    @property
    def dE_photon_total(self) -> float:
        return self.port_factor * self.dE_photon_trans + self.dE_cross

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            [
                (
                    self.omega_hz,
                    self.n_ref,
                    self.dE_qubit,
                    self.dE_photon_trans,
                    self.dE_cross,
                    self.residual,
                    self.mode,
                )
            ],
            schema=LEDGER_SCHEMA,
            orient="row",
        )

    def preparation_frame(self) -> pl.DataFrame:
        rows = [(self.omega_hz, self.n_ref) + tuple(p) for p in self.preparations]
        return pl.DataFrame(rows, schema=PREPARATION_SCHEMA, orient="row")

    def write_csv(self, file_path: Union[str, Path]) -> None:
        self.to_frame().write_csv(Path(file_path))


def ledger_frame(ledgers: Sequence[EnergyLedger]) -> pl.DataFrame:
    if not ledgers:
        return pl.DataFrame(schema=LEDGER_SCHEMA)
    return pl.concat([ledger.to_frame() for ledger in ledgers])


def residual_tolerance(model: SystemModel, n_preparations: int = 2) -> float:
    tol = IDEAL_RESIDUAL_FRACTION * (model.omega / TWO_PI) * n_preparations / 2.0
    # Omega = 0 leaves only discretization noise
    return max(tol, 1e-4 * model.kappa / TWO_PI)


def release_bound(model: SystemModel) -> float:
    """Largest energy one preparation can release, Omega/2 in Hz, with 1e-3 slack."""
    return 0.5 * (model.omega / TWO_PI) * (1.0 + 1e-3) + 1e-12


def energy_balance(
    model: SystemModel,
    schedule=None,
    preparations: Sequence[str] = ("+", "-"),
    dt: float = 1e-9,
    dt_c: float = 25e-9,
    freqs_hz: Optional[np.ndarray] = None,
    n_ref: float = math.nan,
    strict: bool = True,
    fit_triplets: bool = True,
    n_phases: int = 16,
    num_workers: int = 0,
    progress=None,
) -> EnergyLedger:
    """
    Full ledger. Ideal mode (decoherence off) asserts |residual| within 2% of
    Omega when ``strict``; experimental mode only reports it. A preparation
    releasing more than Omega/2 raises when ``strict`` in either mode and is
    otherwise marked in ``within_bound``.
    """
    if schedule is not None:
        model = model.with_updates(schedule=schedule)
    if freqs_hz is None:
        freqs_hz = frequency_grid(min(LEDGER_F_SPAN, 0.5 / dt_c), LEDGER_N_POINTS)
    mode = "experimental" if model.decoherence_enabled else "ideal"
    omega_hz = model.omega / TWO_PI
    out_frac = model.kappa_b / model.kappa
    half = 0.5 * omega_hz

    preps = []
    spectra = []
    for label in progress_iter(preparations, progress=progress, desc="preparations"):
        sign = _orientation(label)
        traj, _, spec = simulate_spectrum(
            model, label, dt=dt, dt_c=dt_c, freqs_hz=freqs_hz, n_ref=n_ref, num_workers=num_workers
        )
        spectra.append(spec)
        moments = spectrum_moments(spec)
        triplet_mean = math.nan
        if fit_triplets and model.omega > 0:
            try:
                triplet_mean = fit_triplet(spec, model.omega).mean_center
            except FitError as e:
                logger.warning(f"triplet fit failed for |{label}>, Omega/2pi = {omega_hz:.3g} Hz: {e}")
        a_on = fringe_amplitude(traj.final_state, n_phases)
        a_off = ramsey_coherence_with_drive(model, False, label, n_phases, dt)
        released_exact = -sign * system_energy_change(traj)
        # the bound is on the qubit term (Omega/2) sigma_x alone
        released_direct = sign * half * _sigma_x_change(traj)
        within_bound = abs(released_direct) <= release_bound(model)
        if not within_bound:
            message = f"|{label}> released {released_direct:.6g} Hz, above the Omega/2 bound {half:.6g} Hz"
            if strict:
                raise EnergyBalanceError(message)
            logger.warning(message)
        preps.append(
            PreparationEnergy(
                label,
                moments.n_total,
                moments.mean_shift,
                triplet_mean,
                released_exact,
                released_direct,
                half * (1.0 - a_on / a_off) if a_off > 0 else math.nan,
                sign * reflected_cross_term(model, traj),
                sign * reflected_cross_term_exact(model, traj),
                within_bound,
            )
        )

    d_qubit = sum(p.released_exact for p in preps)
    d_trans = sum(
        _orientation(p.preparation) * out_frac * p.n_total * p.mean_shift for p in preps
    )
    d_trans_triplet = sum(
        _orientation(p.preparation) * out_frac * p.n_total * p.triplet_mean for p in preps
    )
    d_cross = sum(p.cross_spectral for p in preps)
    residual = d_qubit - (model.port_factor * d_trans + d_cross)

    ledger = EnergyLedger(
        omega_hz,
        n_ref,
        d_qubit,
        sum(p.released_direct for p in preps),
        sum(p.released_ramsey for p in preps),
        d_trans,
        d_trans_triplet,
        d_cross,
        sum(p.cross_exact for p in preps),
        residual,
        mode,
        model.port_factor,
        tuple(preps),
        tuple(spectra),
    )
    tol = residual_tolerance(model, len(preparations))
    logger.info(
        f"ledger Omega/2pi = {omega_hz / 1e6:.3g} MHz, N_ref = {n_ref:.3g}: "
        f"dE_qubit = {d_qubit:.6g}, photons = {ledger.dE_photon_total:.6g}, residual = {residual:.3g}"
    )
    if abs(residual) > tol:
        if mode == "ideal" and strict:
            raise EnergyBalanceError(
                f"energy balance violated: residual {residual:.6g} Hz exceeds {tol:.6g} Hz "
                f"(Omega/2pi = {omega_hz:.6g} Hz, N_ref = {n_ref})"
            )
        if mode == "experimental":
            logger.warning(f"experimental-mode residual {residual:.6g} Hz (tolerance {tol:.6g} Hz)")
    return ledger
