"""
Truncated operators and states of the joint qubit (x) cavity space.

Ordering is fixed globally as qubit (x) cavity. Qubit basis index 0 is |g>,
index 1 is |e>, and sigma_z |e> = +|e>.
"""

import math
from typing import NamedTuple, Dict, Union

import numpy as np
from scipy.linalg import expm, eigvalsh

from pyqme.errors import ConfigurationError, StateInvariantError

QUBIT_DIM = 2

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-8
POSITIVITY_TOL = 1e-8

_SX = np.array([[0, 1], [1, 0]], dtype=np.complex128)
_SY = np.array([[0, 1j], [-1j, 0]], dtype=np.complex128)
_SZ = np.array([[-1, 0], [0, 1]], dtype=np.complex128)
_SP = np.array([[0, 0], [1, 0]], dtype=np.complex128)  # |e><g|
_SM = np.array([[0, 1], [0, 0]], dtype=np.complex128)  # |g><e|

_QUBIT_KETS = {
    "g": np.array([1, 0], dtype=np.complex128),
    "e": np.array([0, 1], dtype=np.complex128),
    "+": np.array([1, 1], dtype=np.complex128) / math.sqrt(2.0),
    "-": np.array([1, -1], dtype=np.complex128) / math.sqrt(2.0),
}


class HilbertSpec(NamedTuple):
    n_max: int

    @classmethod
    def create(cls, n_max: int) -> "HilbertSpec":
        if int(n_max) != n_max or n_max < 1:
            raise ConfigurationError(f"n_max must be an integer >= 1, got {n_max}")
        return cls(int(n_max))

    @property
    def cavity_dim(self) -> int:
        return self.n_max + 1

    @property
    def dim(self) -> int:
        return QUBIT_DIM * (self.n_max + 1)


def default_n_max(n_target: float) -> int:
    return int(math.ceil(4.0 * max(n_target, 1.0) + 6.0))


class Operator(NamedTuple):
    matrix: np.ndarray
    label: str = ""

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dag(self) -> "Operator":
        return Operator(self.matrix.conj().T, f"{self.label}^dag")

    def is_hermitian(self, tol: float = HERMITIAN_TOL) -> bool:
        m = self.matrix
        scale = max(1.0, float(np.max(np.abs(m))))
        return float(np.max(np.abs(m - m.conj().T))) <= tol * scale


class DensityMatrix(NamedTuple):
    matrix: np.ndarray
    time: float = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def check(self) -> "DensityMatrix":
        check_density_matrix(self.matrix)
        return self


def check_density_matrix(
    rho: np.ndarray,
    herm_tol: float = HERMITIAN_TOL,
    trace_tol: float = TRACE_TOL,
    pos_tol: float = POSITIVITY_TOL,
) -> None:
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise StateInvariantError(f"density matrix must be square, got {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise StateInvariantError("density matrix has non-finite entries")
    herm = float(np.max(np.abs(rho - rho.conj().T)))
    if herm > herm_tol:
        raise StateInvariantError(f"not Hermitian: |rho - rho^dag| = {herm:.3e}")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > trace_tol:
        raise StateInvariantError(f"trace = {tr:.12f} deviates from 1")
    lam_min = float(eigvalsh(0.5 * (rho + rho.conj().T))[0])
    if lam_min < -pos_tol:
        raise StateInvariantError(f"negative eigenvalue {lam_min:.3e}")


def _lift_cavity(spec: HilbertSpec, m: np.ndarray) -> np.ndarray:
    return np.kron(np.eye(QUBIT_DIM, dtype=np.complex128), m)


def _lift_qubit(spec: HilbertSpec, m: np.ndarray) -> np.ndarray:
    return np.kron(m, np.eye(spec.cavity_dim, dtype=np.complex128))


def cavity_annihilation(spec: HilbertSpec) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, spec.cavity_dim, dtype=np.float64)), k=1).astype(
        np.complex128
    )


def annihilation(spec: HilbertSpec) -> Operator:
    return Operator(_lift_cavity(spec, cavity_annihilation(spec)), "a")


def creation(spec: HilbertSpec) -> Operator:
    return annihilation(spec).dag()._replace(label="a^dag")


def number(spec: HilbertSpec) -> Operator:
    n = np.diag(np.arange(spec.cavity_dim, dtype=np.float64)).astype(np.complex128)
    return Operator(_lift_cavity(spec, n), "n")


def identity(spec: HilbertSpec) -> Operator:
    return Operator(np.eye(spec.dim, dtype=np.complex128), "I")


def qubit_operators(spec: HilbertSpec = None) -> Dict[str, Operator]:
    """
    Pauli set {sx, sy, sz, sp, sm}. Without ``spec`` the bare 2x2 matrices are
    returned, otherwise they are lifted to the joint space.
    """
    mats = {"sx": _SX, "sy": _SY, "sz": _SZ, "sp": _SP, "sm": _SM}
    if spec is None:
        return {k: Operator(v.copy(), k) for k, v in mats.items()}
    return {k: Operator(_lift_qubit(spec, v), k) for k, v in mats.items()}


def tensor(op_a: Union[Operator, np.ndarray], op_b: Union[Operator, np.ndarray]) -> Operator:
    ma = op_a.matrix if isinstance(op_a, Operator) else np.asarray(op_a)
    mb = op_b.matrix if isinstance(op_b, Operator) else np.asarray(op_b)
    for m in (ma, mb):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"tensor factors must be square matrices, got {m.shape}")
    la = op_a.label if isinstance(op_a, Operator) else "A"
    lb = op_b.label if isinstance(op_b, Operator) else "B"
    return Operator(np.kron(ma, mb).astype(np.complex128), f"{la}(x){lb}")


def qubit_ket(label: str) -> np.ndarray:
    try:
        return _QUBIT_KETS[label].copy()
    except KeyError:
        raise ValueError(
            f"Unknown qubit state: {label}. Supported: {', '.join(_QUBIT_KETS)}"
        ) from None


def basis_state(spec: HilbertSpec, qubit: str, n: int = 0) -> np.ndarray:
    if not 0 <= n <= spec.n_max:
        raise ValueError(f"Fock level {n} outside [0, {spec.n_max}]")
    fock = np.zeros(spec.cavity_dim, dtype=np.complex128)
    fock[n] = 1.0
    return np.kron(qubit_ket(qubit), fock)


def product_state(spec: HilbertSpec, qubit: str, n: int = 0) -> DensityMatrix:
    psi = basis_state(spec, qubit, n)
    return DensityMatrix(np.outer(psi, psi.conj()), 0.0)


def _blocks(rho: np.ndarray) -> np.ndarray:
    d = rho.shape[-1]
    nc = d // QUBIT_DIM
    return rho.reshape(rho.shape[:-2] + (QUBIT_DIM, nc, QUBIT_DIM, nc))


def partial_trace_qubit(rho: Union[DensityMatrix, np.ndarray]) -> DensityMatrix:
    """Reduced qubit state Tr_cavity(rho)."""
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    t = rho.time if isinstance(rho, DensityMatrix) else 0.0
    return DensityMatrix(np.einsum("ajbj->ab", _blocks(m)), t)


def partial_trace_cavity(rho: Union[DensityMatrix, np.ndarray]) -> np.ndarray:
    """Reduced cavity state Tr_qubit(rho)."""
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    return np.einsum("iaib->ab", _blocks(m))


def qubit_rotation(theta: float, phi: float) -> np.ndarray:
    """2x2 rotation by ``theta`` about the equatorial axis (cos phi, sin phi, 0)."""
    gen = math.cos(phi) * _SX + math.sin(phi) * _SY
    return expm(-0.5j * theta * gen)


def rotation(spec: HilbertSpec, theta: float, phi: float) -> np.ndarray:
    """Ideal instantaneous qubit rotation lifted to the joint space."""
    return _lift_qubit(spec, qubit_rotation(theta, phi))
