"""
Two-time correlator c(t1, t2) = <a^dag(t1) a(t2)> by the quantum regression theorem.

For every coarse t2 the seed a rho(t2) is propagated forward under the state
generator and traced against a^dag. All seeds share one stacked propagation.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import NamedTuple, Optional, Union, List

import h5py
import numpy as np
import polars as pl
from scipy.linalg import eigvalsh

from pyqme.errors import ConfigurationError, NyquistError, StateInvariantError
from pyqme.sim.hilbert import DensityMatrix
from pyqme.sim.lindblad import PiecewiseGenerator, StateTrajectory, evolve, propagate
from pyqme.sim.model import PulseSchedule, SystemModel, _operators
from pyqme.sim.utils import progress_iter, steps_in

logger = logging.getLogger(__name__)

DEFAULT_DT_C = 25e-9
DEFAULT_F_SPAN = 10e6
SYMMETRY_TOL = 1e-8
KERNEL_PSD_TOL = 1e-6

CORRELATION_SCHEMA = {
    "t1_s": pl.Float64,
    "t2_s": pl.Float64,
    "re_c": pl.Float64,
    "im_c": pl.Float64,
}


class CorrelationGrid(NamedTuple):
    times: np.ndarray
    values: np.ndarray
    dt_c: float
    model_id: str = ""

    @property
    def n_points(self) -> int:
        return self.times.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.values).real.copy()

    def check(self) -> "CorrelationGrid":
        c = self.values
        asym = float(np.max(np.abs(c - c.conj().T))) if c.size else 0.0
        if asym > SYMMETRY_TOL:
            raise StateInvariantError(f"correlation grid not Hermitian: {asym:.3e}")
        diag = np.diag(c)
        if np.any(diag.real < -SYMMETRY_TOL) or np.any(np.abs(diag.imag) > SYMMETRY_TOL):
            raise StateInvariantError("correlation diagonal must be real and non-negative")
        return self

    def min_kernel_eigenvalue(self) -> float:
        """Smallest eigenvalue of [c(t_i, t_j)] relative to the largest diagonal entry."""
        scale = float(np.max(self.diagonal)) if self.n_points else 0.0
        lam = float(eigvalsh(0.5 * (self.values + self.values.conj().T))[0])
        return lam / scale if scale > 0 else lam

    def to_frame(self) -> pl.DataFrame:
        n = self.n_points
        t1, t2 = np.meshgrid(self.times, self.times, indexing="ij")
        return pl.DataFrame(
            {
                "t1_s": t1.reshape(n * n),
                "t2_s": t2.reshape(n * n),
                "re_c": self.values.real.reshape(n * n),
                "im_c": self.values.imag.reshape(n * n),
            },
            schema=CORRELATION_SCHEMA,
        )

    def write_csv(self, file_path: Union[str, Path]) -> None:
        self.to_frame().write_csv(Path(file_path))

    def write_hdf(
        self, file_path: Union[str, Path], group_key: str = "correlation", overwrite: bool = False
    ) -> None:
        with h5py.File(Path(file_path), "a") as hf:
            if group_key in hf:
                if overwrite:
                    del hf[group_key]
                else:
                    raise FileExistsError(f"group {group_key} already exists")
            grp = hf.create_group(group_key)
            grp.attrs["dt_c"] = self.dt_c
            grp.attrs["model_id"] = self.model_id
            grp.create_dataset("times", data=self.times)
            grp.create_dataset("values", data=self.values)


def regression_seed_propagate(
    model: SystemModel,
    seed: np.ndarray,
    t_from: float,
    t_to: float,
    dt: float = 1e-9,
) -> np.ndarray:
    """Propagate a seed operator; it is not a state, so no invariants are enforced."""
    seed = np.asarray(seed)
    if seed.shape != (model.spec.dim, model.spec.dim):
        raise ValueError(f"seed shape {seed.shape} does not match dim {model.spec.dim}")
    return propagate(model, seed, t_from, t_to, dt)


def check_nyquist(dt_c: float, f_span: float) -> None:
    if dt_c * 2.0 * f_span > 1.0 + 1e-9:
        raise NyquistError(
            f"dt_c = {dt_c * 1e9:.3g} ns cannot resolve +/-{f_span / 1e6:.3g} MHz "
            f"(dt_c * 2 * f_span = {dt_c * 2.0 * f_span:.3f} > 1)"
        )


def _regression_block(
    model: SystemModel,
    dt: float,
    stride: int,
    n_c: int,
    columns: List[int],
    seeds: np.ndarray,
    progress=None,
) -> np.ndarray:
    """
    Rows c[i, j] for i >= j of the given (ascending) columns j.
    ``seeds[m]`` is a rho(t_j) for ``columns[m]``.
    """
    gen = PiecewiseGenerator(model, dt)
    adag = _operators(model.spec)["adag"]
    out = np.zeros((n_c, len(columns)), dtype=np.complex128)
    batch = np.empty_like(seeds)
    active = 0
    for i in progress_iter(range(columns[0], n_c), progress=progress, desc="correlation"):
        while active < len(columns) and columns[active] == i:
            batch[active] = seeds[active]
            active += 1
        out[i, :active] = np.einsum("ij,kji->k", adag, batch[:active])
        if i == n_c - 1:
            break
        live = batch[:active]
        for k in range(i * stride, (i + 1) * stride):
            live = gen.step(k, live)
        batch[:active] = live
    return out


def two_time_correlator(
    model: SystemModel,
    rho0: Union[DensityMatrix, np.ndarray],
    schedule: Optional[PulseSchedule] = None,
    dt: float = 1e-9,
    dt_c: float = DEFAULT_DT_C,
    f_span: float = DEFAULT_F_SPAN,
    trajectory: Optional[StateTrajectory] = None,
    num_workers: int = 0,
    progress=None,
) -> CorrelationGrid:
    if schedule is not None:
        model = model.with_updates(schedule=schedule)
    check_nyquist(dt_c, f_span)
    if dt_c < dt * (1 - 1e-9):
        raise ConfigurationError(f"dt_c = {dt_c:.3e} s is finer than dt = {dt:.3e} s")
    stride = steps_in(dt_c, dt)
    n_steps = steps_in(model.schedule.record_duration, dt)
    if stride is None or n_steps is None or n_steps % stride != 0:
        raise ConfigurationError(
            f"dt_c = {dt_c:.3e} s must be a multiple of dt and divide the record duration"
        )
    n_c = n_steps // stride + 1
    times = np.arange(n_c) * dt_c

    if trajectory is None:
        trajectory = evolve(model, rho0, dt=dt, store_stride=stride)
    a = _operators(model.spec)["a"]
    seeds = np.stack([a @ trajectory.state_at(t).matrix for t in times])

    values = np.zeros((n_c, n_c), dtype=np.complex128)
    if num_workers > 1:
        groups = [list(range(w, n_c, num_workers)) for w in range(num_workers) if w < n_c]
        with ProcessPoolExecutor(max_workers=num_workers) as executor:
            futures = [
                executor.submit(_regression_block, model, dt, stride, n_c, cols, seeds[cols])
                for cols in groups
            ]
            for cols, fut in zip(groups, futures):
                values[:, cols] = fut.result()
    else:
        values[:, :] = _regression_block(
            model, dt, stride, n_c, list(range(n_c)), seeds, progress=progress
        )

    lower = np.tril(values)
    values = lower + np.tril(values, -1).conj().T
    # diagonal is <n>, real up to round-off
    np.fill_diagonal(values, np.diag(lower).real)
    grid = CorrelationGrid(times, values, dt_c, model.model_id)
    logger.info(
        f"correlation grid {n_c}x{n_c} (dt_c = {dt_c * 1e9:.3g} ns), "
        f"min kernel eigenvalue {grid.min_kernel_eigenvalue():.2e}"
    )
    return grid.check()
