import math
import logging

import numpy as np
import numba as nb
from tqdm import tqdm

logger = logging.getLogger(__name__)


class _ProgressIterWrapper:
    """Advances a caller-owned bar (anything with ``update``) once per sweep point."""

    def __init__(self, iterable, bar):
        self._items = list(iterable)
        self._bar = bar

    def __iter__(self):
        for item in self._items:
            yield item
            self._bar.update(1)

    def __len__(self):
        return len(self._items)


def progress_iter(iterable, progress=None, **kwargs):
    """
    ``progress=True`` opens a tqdm bar, an object with ``update`` is advanced
    in place, anything falsy leaves ``iterable`` untouched.
    """
    if progress is True:
        return tqdm(iterable, **kwargs)
    if progress:
        return _ProgressIterWrapper(iterable, progress)
    return iterable


def steps_in(duration: float, dt: float) -> int:
    """Number of ``dt`` steps in ``duration``; ``None`` if not an integer multiple."""
    k = duration / dt
    k_int = int(round(k))
    if abs(k - k_int) > 1e-6 * max(1.0, abs(k)):
        return None
    return k_int


def trapezoid_weights(n: int, step: float) -> np.ndarray:
    w = np.full(n, step, dtype=np.float64)
    if n > 1:
        w[0] *= 0.5
        w[-1] *= 0.5
    return w


@nb.njit(parallel=True, cache=True)
def finite_window_transform(
    times: np.ndarray, weights: np.ndarray, values: np.ndarray, omegas: np.ndarray
) -> np.ndarray:
    """
    F(w) = (2 pi)^-1/2 sum_k weights[k] values[k] exp(+i w t_k)
    times, weights: float64 (n,); values: complex128 (n,); omegas: float64 (m,)
    """
    m = omegas.shape[0]
    n = times.shape[0]
    norm = 1.0 / math.sqrt(2.0 * math.pi)
    out = np.empty(m, dtype=np.complex128)
    for k in nb.prange(m):
        w = omegas[k]
        acc = 0.0 + 0.0j
        for i in range(n):
            acc += weights[i] * values[i] * np.exp(1j * w * times[i])
        out[k] = norm * acc
    return out


@nb.njit(parallel=True, cache=True)
def double_window_quadrature(
    times: np.ndarray, weights: np.ndarray, corr: np.ndarray, omegas: np.ndarray
) -> np.ndarray:
    """
    Q(w) = sum_ij weights[i] weights[j] exp(-i w (t_i - t_j)) corr[i, j]
    returns the real part; corr must be Hermitian so the imaginary part vanishes.
    """
    m = omegas.shape[0]
    n = times.shape[0]
    out = np.empty(m, dtype=np.float64)
    for k in nb.prange(m):
        w = omegas[k]
        phase = np.empty(n, dtype=np.complex128)
        for i in range(n):
            phase[i] = weights[i] * np.exp(-1j * w * times[i])
        acc = 0.0 + 0.0j
        for i in range(n):
            row = 0.0 + 0.0j
            for j in range(n):
                row += corr[i, j] * np.conj(phase[j])
            acc += phase[i] * row
        out[k] = acc.real
    return out
