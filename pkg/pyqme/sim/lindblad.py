import logging
from pathlib import Path
from typing import NamedTuple, Optional, Union, Tuple, Dict

import h5py
import numpy as np
import polars as pl
from scipy.linalg import eigvalsh

from pyqme.errors import (
    ConfigurationError,
    IntegrationError,
    StateInvariantError,
    TruncationError,
)
from pyqme.sim.hilbert import DensityMatrix, Operator, check_density_matrix
from pyqme.sim.model import (
    PulseSchedule,
    SystemModel,
    _operators,
    check_time_step,
    collapse_operators,
    hamiltonian,
)
from pyqme.sim.utils import progress_iter, steps_in

logger = logging.getLogger(__name__)

TRACE_DRIFT_TOL = 1e-6
POSITIVITY_TOL = 1e-6
OCCUPANCY_TOL = 1e-4

TRAJECTORY_SCHEMA = {
    "t_s": pl.Float64,
    "re_tr": pl.Float64,
    "n_exp": pl.Float64,
    "sx_exp": pl.Float64,
    "sz_exp": pl.Float64,
    "coh_ge_abs": pl.Float64,
    "a_re": pl.Float64,
    "a_im": pl.Float64,
}

CSV_COLUMNS = ["t_s", "re_tr", "n_exp", "sx_exp", "sz_exp", "coh_ge_abs"]


class Superoperator(NamedTuple):
    """Generator acting on column-stacked density matrices."""

    matrix: np.ndarray
    dim: int

    def apply(self, rho: np.ndarray) -> np.ndarray:
        out = self.matrix @ vectorize(rho)
        return unvectorize(out, self.dim)


def vectorize(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1, order="F")


def unvectorize(vec: np.ndarray, dim: int) -> np.ndarray:
    return np.asarray(vec).reshape(dim, dim, order="F")


def liouvillian(model: SystemModel, t: float) -> Superoperator:
    h = hamiltonian(model, t).matrix
    d = h.shape[0]
    eye = np.eye(d, dtype=np.complex128)
    gen = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for c in collapse_operators(model):
        m = c.matrix
        mdm = m.conj().T @ m
        gen += np.kron(m.conj(), m) - 0.5 * np.kron(eye, mdm) - 0.5 * np.kron(mdm.T, eye)
    return Superoperator(gen, d)


def _lmul(a: np.ndarray, rho: np.ndarray) -> np.ndarray:
    # a @ rho for one matrix or a stack (m, d, d), as a single gemm
    if rho.ndim == 2:
        return a @ rho
    return np.moveaxis(np.tensordot(a, rho, axes=(1, 1)), 0, 1)


def _rmul(rho: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (rho.reshape(-1, rho.shape[-1]) @ b).reshape(rho.shape)


class _Segment(NamedTuple):
    h_eff: np.ndarray
    h_eff_dag: np.ndarray
    jumps: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    diag_masks: Tuple[np.ndarray, ...]


class PiecewiseGenerator:
    """
    Time-ordered Lindblad generator on a uniform grid aligned to pulse edges.

    Step ``k`` covers [k dt, (k+1) dt]; the Hamiltonian is constant over each step.
    Works on single (d, d) matrices and on stacks (m, d, d).
    """

    def __init__(self, model: SystemModel, dt: float):
        check_time_step(model, dt)
        n_steps = steps_in(model.schedule.record_duration, dt)
        if n_steps is None or n_steps < 1:
            raise ConfigurationError(
                f"record duration {model.schedule.record_duration:.6e} s is not a "
                f"positive multiple of dt = {dt:.3e} s"
            )
        self.model = model
        self.dt = dt
        self.n_steps = n_steps
        self._cache: Dict[Tuple[bool, bool], _Segment] = {}
        schedule = model.schedule
        self._keys = [
            (schedule.drive_on((k + 0.5) * dt), schedule.probe_on((k + 0.5) * dt))
            for k in range(n_steps)
        ]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def _segment(self, k: int) -> _Segment:
        key = self._keys[k]
        seg = self._cache.get(key)
        if seg is None:
            seg = self._build_segment((k + 0.5) * self.dt)
            self._cache[key] = seg
        return seg

    def _build_segment(self, t: float) -> _Segment:
        h = hamiltonian(self.model, t).matrix
        h_eff = h.astype(np.complex128)
        jumps = []
        masks = []
        for c in collapse_operators(self.model):
            m = c.matrix
            h_eff = h_eff - 0.5j * (m.conj().T @ m)
            if np.count_nonzero(m - np.diag(np.diag(m))) == 0:
                diag = np.diag(m)
                masks.append(np.outer(diag, diag.conj()))
            else:
                jumps.append((m, m.conj().T.copy()))
        return _Segment(h_eff, h_eff.conj().T.copy(), tuple(jumps), tuple(masks))

    @staticmethod
    def _rhs(seg: _Segment, rho: np.ndarray) -> np.ndarray:
        out = -1j * (_lmul(seg.h_eff, rho) - _rmul(rho, seg.h_eff_dag))
        for m, m_dag in seg.jumps:
            out += _rmul(_lmul(m, rho), m_dag)
        for mask in seg.diag_masks:
            out += mask * rho
        return out

    def step(self, k: int, rho: np.ndarray) -> np.ndarray:
        """Classical fourth-order Runge-Kutta step from k dt to (k+1) dt."""
        seg = self._segment(k)
        dt = self.dt
        k1 = self._rhs(seg, rho)
        k2 = self._rhs(seg, rho + 0.5 * dt * k1)
        k3 = self._rhs(seg, rho + 0.5 * dt * k2)
        k4 = self._rhs(seg, rho + dt * k3)
        return rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step_index(self, t: float) -> int:
        k = steps_in(t, self.dt)
        if k is None or not 0 <= k <= self.n_steps:
            raise ConfigurationError(f"time {t:.6e} s is not on the dt grid of this generator")
        return k


class StateTrajectory:
    """
    Density matrices on a uniform grid (every ``store_stride`` fine steps) plus
    observables recorded on every fine step.
    """

    def __init__(
        self,
        model: SystemModel,
        dt: float,
        times: np.ndarray,
        states: np.ndarray,
        observables: pl.DataFrame,
    ):
        times.flags.writeable = False
        states.flags.writeable = False
        self.model = model
        self.dt = dt
        self.times = times
        self.states = states
        self.observables = observables

    def __len__(self) -> int:
        return self.times.shape[0]

    @property
    def fine_times(self) -> np.ndarray:
        return self.observables["t_s"].to_numpy()

    @property
    def photon_number(self) -> np.ndarray:
        return self.observables["n_exp"].to_numpy()

    @property
    def cavity_field(self) -> np.ndarray:
        """<a>(t) on the fine grid."""
        return self.observables["a_re"].to_numpy() + 1j * self.observables["a_im"].to_numpy()

    def state(self, index: int) -> DensityMatrix:
        return DensityMatrix(self.states[index], float(self.times[index]))

    def state_at(self, t: float) -> DensityMatrix:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-6 * self.dt:
            raise ValueError(f"no stored state at t = {t:.6e} s")
        return self.state(idx)

    @property
    def initial_state(self) -> DensityMatrix:
        return self.state(0)

    @property
    def final_state(self) -> DensityMatrix:
        return self.state(len(self) - 1)

    def to_frame(self) -> pl.DataFrame:
        return self.observables

    def write_csv(self, file_path: Union[str, Path]) -> None:
        self.observables.select(CSV_COLUMNS).write_csv(Path(file_path))

    def write_hdf(
        self, file_path: Union[str, Path], group_key: str = "trajectory", overwrite: bool = False
    ) -> None:
        with h5py.File(Path(file_path), "a") as hf:
            if group_key in hf:
                if overwrite:
                    del hf[group_key]
                else:
                    raise FileExistsError(f"group {group_key} already exists")
            grp = hf.create_group(group_key)
            grp.attrs["model_id"] = self.model.model_id
            grp.attrs["dt"] = self.dt
            grp.create_dataset("times", data=self.times)
            grp.create_dataset("states", data=self.states)
            for name in self.observables.columns:
                grp.create_dataset(f"observables/{name}", data=self.observables[name].to_numpy())


def _as_matrix(rho0: Union[DensityMatrix, np.ndarray]) -> np.ndarray:
    m = rho0.matrix if isinstance(rho0, DensityMatrix) else np.asarray(rho0)
    return np.array(m, dtype=np.complex128)


def evolve(
    model: SystemModel,
    rho0: Union[DensityMatrix, np.ndarray],
    schedule: Optional[PulseSchedule] = None,
    dt: float = 1e-9,
    store_stride: int = 1,
    check_truncation: bool = True,
    progress=None,
) -> StateTrajectory:
    """
    Integrate the master equation over [0, record_duration].

    ``store_stride`` > 0 keeps every stride-th state, 0 keeps only the first and
    last. States are never renormalized: a breach raises IntegrationError.
    """
    if schedule is not None:
        model = model.with_updates(schedule=schedule)
    rho = _as_matrix(rho0)
    if rho.shape != (model.spec.dim, model.spec.dim):
        raise ValueError(f"rho0 shape {rho.shape} does not match dim {model.spec.dim}")
    check_density_matrix(rho)

    gen = PiecewiseGenerator(model, dt)
    n_steps = gen.n_steps
    if store_stride > 0 and n_steps % store_stride != 0:
        raise ConfigurationError(
            f"store_stride {store_stride} does not divide the {n_steps} integration steps"
        )
    stored_ks = (
        np.arange(0, n_steps + 1, store_stride) if store_stride > 0 else np.array([0, n_steps])
    )
    stored_set = {int(k): i for i, k in enumerate(stored_ks)}
    states = np.empty((len(stored_ks), model.spec.dim, model.spec.dim), dtype=np.complex128)

    ops = _operators(model.spec)
    nc = model.spec.cavity_dim
    top = model.spec.n_max
    # Tr[O rho] = sum(O^T * rho)
    obs_ops = {k: ops[k].T.copy() for k in ("n", "sx", "sz", "a")}
    cols = {name: np.empty(n_steps + 1) for name in TRAJECTORY_SCHEMA}
    t_grid = gen.times

    def record(k: int, rho: np.ndarray) -> None:
        t = t_grid[k]
        tr = np.trace(rho)
        if abs(tr - 1.0) > TRACE_DRIFT_TOL:
            raise IntegrationError(f"trace drift {abs(tr - 1.0):.3e}", t)
        if check_truncation:
            top_pop = (rho[top, top] + rho[nc + top, nc + top]).real
            if top_pop > OCCUPANCY_TOL:
                raise TruncationError(
                    f"population {top_pop:.3e} in Fock level n_max = {top}; increase n_max", t
                )
        a_exp = np.sum(obs_ops["a"] * rho)
        cols["t_s"][k] = t
        cols["re_tr"][k] = tr.real
        cols["n_exp"][k] = np.sum(obs_ops["n"] * rho).real
        cols["sx_exp"][k] = np.sum(obs_ops["sx"] * rho).real
        cols["sz_exp"][k] = np.sum(obs_ops["sz"] * rho).real
        cols["coh_ge_abs"][k] = abs(np.trace(rho[:nc, nc:]))
        cols["a_re"][k] = a_exp.real
        cols["a_im"][k] = a_exp.imag
        idx = stored_set.get(k)
        if idx is not None:
            herm = float(np.max(np.abs(rho - rho.conj().T)))
            if herm > TRACE_DRIFT_TOL:
                raise IntegrationError(f"Hermiticity lost: {herm:.3e}", t)
            lam_min = float(eigvalsh(0.5 * (rho + rho.conj().T))[0])
            if lam_min < -POSITIVITY_TOL:
                raise IntegrationError(f"negative eigenvalue {lam_min:.3e}", t)
            states[idx] = rho

    record(0, rho)
    for k in progress_iter(range(n_steps), progress=progress, desc="evolve"):
        rho = gen.step(k, rho)
        record(k + 1, rho)

    observables = pl.DataFrame(cols, schema=TRAJECTORY_SCHEMA)
    return StateTrajectory(model, dt, t_grid[stored_ks], states, observables)


def propagate(
    model: SystemModel,
    matrix: np.ndarray,
    t_from: float,
    t_to: float,
    dt: float = 1e-9,
) -> np.ndarray:
    """Propagate any operator (state or regression seed) without invariant checks."""
    if t_to < t_from:
        raise ValueError(f"t_to ({t_to:.3e}) precedes t_from ({t_from:.3e})")
    gen = PiecewiseGenerator(model, dt)
    k_from = gen.step_index(t_from)
    k_to = gen.step_index(t_to)
    y = np.array(matrix, dtype=np.complex128)
    for k in range(k_from, k_to):
        y = gen.step(k, y)
    return y


def expectation_series(traj: StateTrajectory, op: Union[Operator, np.ndarray]) -> np.ndarray:
    """Tr[op rho(t)] on the stored grid; real for Hermitian ``op``."""
    m = op.matrix if isinstance(op, Operator) else np.asarray(op)
    if m.shape != traj.states.shape[1:]:
        raise ValueError(f"operator shape {m.shape} does not match states {traj.states.shape[1:]}")
    values = np.einsum("ij,kji->k", m, traj.states)
    if np.max(np.abs(m - m.conj().T)) <= 1e-12 * max(1.0, float(np.max(np.abs(m)))):
        resid = float(np.max(np.abs(values.imag))) if values.size else 0.0
        if resid > 1e-10 * max(1.0, float(np.max(np.abs(values.real)))):
            raise StateInvariantError(
                f"imaginary residue {resid:.3e} for a Hermitian observable"
            )
        return values.real.copy()
    return values
