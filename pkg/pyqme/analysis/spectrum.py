"""
Emitted-photon power spectrum from a finite-window double quadrature of the
two-time correlator, its moments and its three-Lorentzian decomposition.

Frequencies are detunings from the probe carrier in Hz; spectra are in
photons per Hz so that the integral over the axis counts photons.
"""

import math
import json
import logging
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple, Union, Dict

import numpy as np
import polars as pl
from scipy.integrate import trapezoid

from pyqme.errors import FitError, NyquistError, UndefinedMeanError
from pyqme.analysis.fitcore import FitResult, fit_lorentzian_sum
from pyqme.sim.correlation import CorrelationGrid, two_time_correlator
from pyqme.sim.hilbert import product_state
from pyqme.sim.lindblad import StateTrajectory, evolve
from pyqme.sim.model import SystemModel, TWO_PI
from pyqme.sim.utils import (
    double_window_quadrature,
    progress_iter,
    steps_in,
    trapezoid_weights,
)

logger = logging.getLogger(__name__)

DEFAULT_F_SPAN = 10e6
DEFAULT_N_POINTS = 401
RIPPLE_TOL = 1e-6
PHOTON_FLOOR = 1e-12

SPECTRUM_SCHEMA = {
    "freq_hz": pl.Float64,
    "s_photons_per_hz": pl.Float64,
    "state_label": pl.Utf8,
    "omega_rads": pl.Float64,
    "n_ref": pl.Float64,
}

PHOTON_SWEEP_SCHEMA = {
    "omega_hz": pl.Float64,
    "n_emitted": pl.Float64,
    "n_ref": pl.Float64,
    "preparation": pl.Utf8,
}


def frequency_grid(f_span: float = DEFAULT_F_SPAN, n_points: int = DEFAULT_N_POINTS) -> np.ndarray:
    if f_span <= 0 or n_points < 3:
        raise ValueError(f"need f_span > 0 and n_points >= 3, got {f_span}, {n_points}")
    return np.linspace(-f_span, f_span, n_points)


class PowerSpectrum(NamedTuple):
    freqs_hz: np.ndarray
    values: np.ndarray
    kappa: float
    tau: float
    model_id: str = ""
    state_label: str = ""
    omega: float = 0.0
    n_ref: float = float("nan")
    flags: Tuple[str, ...] = ()

    @property
    def total_photons(self) -> float:
        return float(trapezoid(self.values, self.freqs_hz))

    @property
    def min_relative(self) -> float:
        peak = float(np.max(np.abs(self.values)))
        return float(np.min(self.values)) / peak if peak > 0 else 0.0

    def to_frame(self) -> pl.DataFrame:
        n = self.freqs_hz.shape[0]
        return pl.DataFrame(
            {
                "freq_hz": self.freqs_hz,
                "s_photons_per_hz": self.values,
                "state_label": [self.state_label] * n,
                "omega_rads": np.full(n, self.omega),
                "n_ref": np.full(n, self.n_ref),
            },
            schema=SPECTRUM_SCHEMA,
        )

    def write_csv(self, file_path: Union[str, Path]) -> None:
        self.to_frame().write_csv(Path(file_path))


def check_band(freqs_hz: np.ndarray, dt_c: float) -> None:
    f_max = float(np.max(np.abs(freqs_hz)))
    if 2.0 * f_max * dt_c > 1.0 + 1e-9:
        raise NyquistError(
            f"frequency axis reaches {f_max / 1e6:.3g} MHz but dt_c = {dt_c * 1e9:.3g} ns "
            f"only resolves {0.5 / dt_c / 1e6:.3g} MHz"
        )


def power_spectrum(
    grid: CorrelationGrid,
    kappa: float,
    freqs_hz: Optional[np.ndarray] = None,
    state_label: str = "",
    omega: float = 0.0,
    n_ref: float = float("nan"),
) -> PowerSpectrum:
    """
    s(f) = kappa * sum_ij w_i w_j exp(-i 2 pi f (t_i - t_j)) c(t_i, t_j)

    Trapezoidal weights over the full record window, no taper.
    """
    if freqs_hz is None:
        freqs_hz = frequency_grid()
    freqs_hz = np.asarray(freqs_hz, dtype=np.float64)
    check_band(freqs_hz, grid.dt_c)
    weights = trapezoid_weights(grid.n_points, grid.dt_c)
    quad = double_window_quadrature(
        grid.times.astype(np.float64),
        weights,
        np.ascontiguousarray(grid.values, dtype=np.complex128),
        TWO_PI * freqs_hz,
    )
    values = kappa * quad
    flags = ()
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if peak > 0 and float(np.min(values)) < -RIPPLE_TOL * peak:
        flags = ("negative_ripple",)
        logger.warning(
            f"spectrum {state_label!r}: negative quadrature ripple "
            f"{float(np.min(values)) / peak:.2e} of the peak"
        )
    tau = float(grid.times[-1]) if grid.n_points else 0.0
    return PowerSpectrum(
        freqs_hz, values, kappa, tau, grid.model_id, state_label, omega, n_ref, flags
    )


class SpectrumMoments(NamedTuple):
    n_total: float
    mean_shift: float


def spectrum_moments(s: PowerSpectrum) -> SpectrumMoments:
    """Photon number and mean frequency shift (Hz), from the raw (unclipped) values."""
    n_total = s.total_photons
    if abs(n_total) <= PHOTON_FLOOR:
        raise UndefinedMeanError(
            f"spectrum {s.state_label!r} carries {n_total:.3e} photons; mean shift undefined"
        )
    first = float(trapezoid(s.freqs_hz * s.values, s.freqs_hz))
    return SpectrumMoments(n_total, first / n_total)


def difference_spectrum(s_a: PowerSpectrum, s_b: PowerSpectrum) -> PowerSpectrum:
    if not np.array_equal(s_a.freqs_hz, s_b.freqs_hz):
        raise ValueError("spectra are on different frequency grids")
    return s_a._replace(
        values=s_a.values - s_b.values,
        state_label=f"{s_a.state_label}-{s_b.state_label}",
        flags=(),
    )


class LorentzianTriplet(NamedTuple):
    centers: np.ndarray  # Hz
    widths: np.ndarray  # half-widths, Hz
    areas: np.ndarray  # photons
    residual: float
    fit: Optional[FitResult] = None

    @property
    def mean_center(self) -> float:
        total = float(np.sum(self.areas))
        if total <= 0:
            raise UndefinedMeanError("triplet carries no area")
        return float(np.sum(self.areas * self.centers)) / total

    @property
    def total_area(self) -> float:
        return float(np.sum(self.areas))

    @property
    def side_peak_separation(self) -> float:
        return float(self.centers[2] - self.centers[0])

    @property
    def dominant_side_center(self) -> float:
        return float(self.centers[0] if self.areas[0] >= self.areas[2] else self.centers[2])

    def evaluate(self, freqs_hz: np.ndarray) -> np.ndarray:
        out = np.zeros_like(freqs_hz, dtype=np.float64)
        for c, w, a in zip(self.centers, self.widths, self.areas):
            out += a / math.pi * w / ((freqs_hz - c) ** 2 + w**2)
        return out

    def to_dict(self) -> Dict[str, object]:
        return {
            "centers_hz": [float(v) for v in self.centers],
            "half_widths_hz": [float(v) for v in self.widths],
            "areas_photons": [float(v) for v in self.areas],
            "mean_center_hz": self.mean_center if self.total_area > 0 else None,
            "residual": float(self.residual),
        }

    def write_json(self, file_path: Union[str, Path]) -> None:
        with open(file_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _local_area(freqs: np.ndarray, values: np.ndarray, lo: float, hi: float) -> float:
    mask = (freqs >= lo) & (freqs <= hi)
    if np.count_nonzero(mask) < 2:
        return 0.0
    return float(trapezoid(values[mask], freqs[mask]))


def fit_triplet(s: PowerSpectrum, omega_hint: float) -> LorentzianTriplet:
    """
    Three area-parameterized Lorentzians started at {-Omega, 0, +Omega} with
    half-width kappa/4pi and areas from the integrals over +/- Omega/2 windows.
    """
    if not omega_hint > 0:
        raise ValueError(f"omega_hint must be > 0, got {omega_hint}")
    # fit in MHz and photons/MHz
    x = s.freqs_hz / 1e6
    y = s.values * 1e6
    f_hint = omega_hint / TWO_PI / 1e6
    width = s.kappa / (2.0 * TWO_PI) / 1e6
    floor = 1e-3 * max(float(trapezoid(y, x)), PHOTON_FLOOR)
    init = []
    for c in (-f_hint, 0.0, f_hint):
        area = max(_local_area(x, y, c - 0.5 * f_hint, c + 0.5 * f_hint), floor)
        init += [c, width, area]

    fit = fit_lorentzian_sum(x, y, init)
    if not fit.converged:
        raise FitError(f"Lorentzian triplet did not converge for {s.state_label!r}", fit.residual_norm)

    p = fit.params.reshape(3, 3)
    order = np.argsort(p[:, 0], kind="stable")
    p = p[order]
    centers = p[:, 0] * 1e6
    widths = np.abs(p[:, 1]) * 1e6
    areas = p[:, 2]
    total = float(np.sum(np.abs(areas)))
    if np.any(areas < -1e-6 * total):
        raise FitError(
            f"Lorentzian triplet for {s.state_label!r} has negative areas {areas}", fit.residual_norm
        )
    areas = np.clip(areas, 0.0, None)
    # residual in photons/Hz units
    return LorentzianTriplet(centers, widths, areas, fit.residual_norm / 1e6, fit)


def preparation_state(model: SystemModel, preparation: str):
    return product_state(model.spec, preparation, 0)


def simulate_spectrum(
    model: SystemModel,
    preparation: str,
    dt: float = 1e-9,
    dt_c: float = 25e-9,
    freqs_hz: Optional[np.ndarray] = None,
    n_ref: float = float("nan"),
    num_workers: int = 0,
    progress=None,
) -> Tuple[StateTrajectory, CorrelationGrid, PowerSpectrum]:
    """Trajectory, correlator and spectrum for the qubit prepared in |preparation>|0>."""
    if freqs_hz is None:
        freqs_hz = frequency_grid()
    stride = steps_in(dt_c, dt)
    rho0 = preparation_state(model, preparation)
    traj = evolve(model, rho0, dt=dt, store_stride=stride or 1)
    grid = two_time_correlator(
        model,
        rho0,
        dt=dt,
        dt_c=dt_c,
        f_span=float(np.max(np.abs(freqs_hz))),
        trajectory=traj,
        num_workers=num_workers,
        progress=progress,
    )
    spec = power_spectrum(grid, model.kappa, freqs_hz, preparation, model.omega, n_ref)
    return traj, grid, spec


def photon_count_check(
    traj: StateTrajectory, grid: CorrelationGrid, kappa: float, n_points: int = 1601
) -> Tuple[float, float]:
    """
    (spectral, direct) photon counts. The spectral count integrates over the
    whole band the correlator resolves, so the two agree up to discretization.
    """
    freqs = frequency_grid(0.5 / grid.dt_c, n_points)
    spectral = power_spectrum(grid, kappa, freqs).total_photons
    direct = kappa * float(trapezoid(traj.photon_number, traj.fine_times))
    return spectral, direct


def transmitted_photons_vs_omega(
    model: SystemModel,
    omega_list: Sequence[float],
    n_ref: float,
    preparation: str = "+",
    dt: float = 1e-9,
    progress=None,
) -> pl.DataFrame:
    """
    Output-port photon count per qubit drive strength at the fixed probe
    amplitude of ``model`` (calibrated at Omega = 0 to ``n_ref``).
    """
    from pyqme.analysis.energetics import emitted_photons

    rows = []
    for omega in progress_iter(omega_list, progress=progress, desc="N(omega)"):
        m = model.with_updates(omega=float(omega))
        traj = evolve(m, preparation_state(m, preparation), dt=dt, store_stride=0)
        rows.append((omega / TWO_PI, emitted_photons(traj, m.kappa_b), n_ref, preparation))
    frame = pl.DataFrame(rows, schema=PHOTON_SWEEP_SCHEMA, orient="row")
    counts = frame["n_emitted"].to_numpy()
    if counts.shape[0] > 1 and np.any(np.diff(counts) < 0):
        logger.warning(f"N(omega) is not monotone for N_ref = {n_ref}")
    return frame
