"""
Deterministic nonlinear least squares (damped Gauss-Newton with Marquardt
scaling) and the fit forms used by calibration and spectrum analysis.
"""

import math
import logging
from typing import NamedTuple, Callable, Optional, Tuple, Dict, Sequence

import numpy as np

from pyqme.errors import FitError

logger = logging.getLogger(__name__)

XTOL = 1e-10
GTOL = 1e-10
MAX_ITER = 500
LAMBDA_INIT = 1e-3
LAMBDA_MAX = 1e16
STALL_GTOL = 1e-8
MAX_SINGULAR_RETRIES = 8


class FitModel(NamedTuple):
    name: str
    param_names: Tuple[str, ...]
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def analytic_jacobian(self) -> bool:
        return self.jac is not None

    def validate(self) -> "FitModel":
        if len(set(self.param_names)) != len(self.param_names):
            raise ValueError(f"{self.name}: parameter names must be unique")
        return self

    def residual(self, x: np.ndarray, y: np.ndarray, p: np.ndarray) -> np.ndarray:
        return self.func(x, p) - y

    def jacobian(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        if self.jac is not None:
            return self.jac(x, p)
        return finite_difference_jacobian(self.func, x, p)


class FitResult(NamedTuple):
    model_name: str
    param_names: Tuple[str, ...]
    params: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    cost_history: Tuple[float, ...] = ()
    flags: Tuple[str, ...] = ()

    def value(self, name: str) -> float:
        try:
            return float(self.params[self.param_names.index(name)])
        except ValueError:
            raise KeyError(
                f"Unknown parameter: {name}. Supported: {', '.join(self.param_names)}"
            ) from None

    def stderr(self, name: str) -> float:
        i = self.param_names.index(name)
        return float(math.sqrt(max(self.covariance[i, i], 0.0)))

    def as_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in zip(self.param_names, self.params)}


def finite_difference_jacobian(
    func: Callable, x: np.ndarray, p: np.ndarray, rel_step: float = 1e-5
) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    cols = []
    for j in range(p.shape[0]):
        h = rel_step * max(abs(p[j]), 1.0)
        up, dn = p.copy(), p.copy()
        up[j] += h
        dn[j] -= h
        cols.append((func(x, up) - func(x, dn)) / (2.0 * h))
    return np.stack(cols, axis=1)


def jacobian_check(model: FitModel, x: np.ndarray, p: np.ndarray) -> float:
    """Largest column-wise relative gap between the analytic and central-difference Jacobians."""
    if not model.analytic_jacobian:
        raise ValueError(f"{model.name} has no analytic Jacobian")
    ja = model.jac(x, np.asarray(p, dtype=np.float64))
    jf = finite_difference_jacobian(model.func, x, p)
    worst = 0.0
    for j in range(ja.shape[1]):
        scale = float(np.max(np.abs(ja[:, j])))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.max(np.abs(ja[:, j] - jf[:, j]))) / scale)
    return worst


def _solve_damped(a: np.ndarray, g: np.ndarray, diag: np.ndarray, lam: float):
    for _ in range(MAX_SINGULAR_RETRIES):
        try:
            step = np.linalg.solve(a + lam * np.diag(diag), -g)
            if np.all(np.isfinite(step)):
                return step, lam
        except np.linalg.LinAlgError:
            pass
        lam = max(lam * 10.0, 1e-12)
    raise FitError("singular normal equations after damped retries")


def least_squares(
    model: FitModel,
    x: np.ndarray,
    y: np.ndarray,
    init: Sequence[float],
    xtol: float = XTOL,
    gtol: float = GTOL,
    max_iter: int = MAX_ITER,
) -> FitResult:
    model.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = np.array(init, dtype=np.float64)
    n = model.n_params
    if p.shape != (n,):
        raise ValueError(f"{model.name}: expected {n} initial values, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{model.name}: initial parameters must be finite")
    if y.shape[0] < n:
        raise FitError(f"{model.name}: {y.shape[0]} points for {n} parameters")

    r = model.residual(x, y, p)
    if not np.all(np.isfinite(r)):
        raise FitError(f"{model.name}: residual is not finite at the initial point")
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = LAMBDA_INIT
    diag = np.zeros(n)
    converged = False
    stalled = False
    worst_ortho = math.inf
    it = 0
    jac = model.jacobian(x, p)

    while it < max_iter:
        it += 1
        g = jac.T @ r
        a = jac.T @ jac
        # Marquardt scaling, never shrinking
        diag = np.maximum(diag, np.diag(a))
        d = np.where(diag > 0, diag, 1.0)

        col_norm = np.sqrt(np.diag(a))
        r_norm = math.sqrt(2.0 * cost)
        if cost == 0.0 or r_norm == 0.0:
            converged = True
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            ortho = np.where(col_norm > 0, np.abs(g) / (col_norm * r_norm), 0.0)
        worst_ortho = float(np.max(ortho))
        if worst_ortho <= gtol:
            converged = True
            break

        step, lam = _solve_damped(a, g, d, lam)
        p_new = p + step
        r_new = model.residual(x, y, p_new)
        cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
        if cost_new <= cost:
            p, r, cost = p_new, r_new, cost_new
            history.append(cost)
            jac = model.jacobian(x, p)
            lam = max(lam / 10.0, 1e-15)
            scale = np.sqrt(d)
            if np.linalg.norm(scale * step) <= xtol * (np.linalg.norm(scale * p) + xtol):
                converged = True
                break
        else:
            lam *= 10.0
            if lam > LAMBDA_MAX:
                stalled = True
                break

    if stalled:
        # no descent left; only a flat gradient counts as a minimum
        converged = worst_ortho <= STALL_GTOL

    m = y.shape[0]
    s2 = 2.0 * cost / (m - n) if m > n else 0.0
    covariance = s2 * np.linalg.pinv(jac.T @ jac)
    result = FitResult(
        model.name,
        model.param_names,
        p,
        covariance,
        math.sqrt(2.0 * cost),
        it,
        converged,
        tuple(history),
        ("stalled",) if stalled else (),
    )
    if not converged:
        logger.warning(
            f"{model.name} fit did not converge after {it} iterations "
            f"(residual norm {result.residual_norm:.3e})"
        )
    return result


# ---------------------------------------------------------------------------
# Fit forms
# ---------------------------------------------------------------------------


def _line(x, p):
    return p[0] * x + p[1]


def _line_jac(x, p):
    return np.stack([x, np.ones_like(x)], axis=1)


LINE = FitModel("line", ("slope", "intercept"), _line, _line_jac)
LINE_THROUGH_ORIGIN = FitModel(
    "line_through_origin",
    ("slope",),
    lambda x, p: p[0] * x,
    lambda x, p: x[:, None].astype(np.float64),
)


def _sinusoid(t, p):
    amp, freq, phase, offset = p
    return amp * np.sin(2.0 * math.pi * freq * t + phase) + offset


def _sinusoid_jac(t, p):
    amp, freq, phase, _ = p
    theta = 2.0 * math.pi * freq * t + phase
    s, c = np.sin(theta), np.cos(theta)
    return np.stack([s, amp * c * 2.0 * math.pi * t, amp * c, np.ones_like(t)], axis=1)


SINUSOID = FitModel("sinusoid", ("amplitude", "frequency", "phase", "offset"), _sinusoid, _sinusoid_jac)


def _gaussian_centered(x, p):
    height, sigma = p
    return height * np.exp(-0.5 * (x / sigma) ** 2)


def _gaussian_centered_jac(x, p):
    height, sigma = p
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return np.stack([g, height * g * x**2 / sigma**3], axis=1)


GAUSSIAN_CENTERED = FitModel(
    "gaussian_centered", ("height", "sigma"), _gaussian_centered, _gaussian_centered_jac
)


def _exponential(t, p):
    amp, rate, offset = p
    return amp * np.exp(-rate * t) + offset


def _exponential_jac(t, p):
    amp, rate, _ = p
    e = np.exp(-rate * t)
    return np.stack([e, -amp * t * e, np.ones_like(t)], axis=1)


EXPONENTIAL = FitModel("exponential", ("amplitude", "rate", "offset"), _exponential, _exponential_jac)
EXPONENTIAL_NO_OFFSET = FitModel(
    "exponential_no_offset",
    ("amplitude", "rate"),
    lambda t, p: p[0] * np.exp(-p[1] * t),
    lambda t, p: np.stack([np.exp(-p[1] * t), -p[0] * t * np.exp(-p[1] * t)], axis=1),
)


def lorentzian_sum_model(n_peaks: int) -> FitModel:
    """
    Sum of area-normalized Lorentzians, area/pi * w / ((x - c)^2 + w^2).
    Parameters per peak: center, half-width, area.
    """

    def func(x, p):
        out = np.zeros_like(x, dtype=np.float64)
        for k in range(n_peaks):
            c, w, area = p[3 * k : 3 * k + 3]
            out += area / math.pi * w / ((x - c) ** 2 + w**2)
        return out

    def jac(x, p):
        cols = []
        for k in range(n_peaks):
            c, w, area = p[3 * k : 3 * k + 3]
            u = x - c
            den = u**2 + w**2
            cols.append(area / math.pi * 2.0 * w * u / den**2)
            cols.append(area / math.pi * (u**2 - w**2) / den**2)
            cols.append(w / (math.pi * den))
        return np.stack(cols, axis=1)

    names = []
    for k in range(n_peaks):
        names += [f"center{k}", f"width{k}", f"area{k}"]
    return FitModel(f"lorentzian_sum{n_peaks}", tuple(names), func, jac)


# ---------------------------------------------------------------------------
# Convenience fits with deterministic initialization
# ---------------------------------------------------------------------------


def fit_line(x: np.ndarray, y: np.ndarray, intercept: bool = True) -> FitResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if intercept:
        if x.shape[0] < 2:
            raise FitError(f"line fit needs >= 2 points, got {x.shape[0]}")
        design = np.stack([x, np.ones_like(x)], axis=1)
        init = np.linalg.lstsq(design, y, rcond=None)[0]
        return least_squares(LINE, x, y, init)
    if x.shape[0] < 1:
        raise FitError("line fit needs at least one point")
    denom = float(x @ x)
    init = [float(x @ y) / denom if denom > 0 else 0.0]
    return least_squares(LINE_THROUGH_ORIGIN, x, y, init)


def periodogram_peak(t: np.ndarray, y: np.ndarray, oversample: int = 8) -> Tuple[float, complex]:
    """Frequency (Hz) and complex amplitude sum(y e^{-2 pi i f t}) of the strongest component."""
    span = float(t[-1] - t[0])
    steps = np.diff(t)
    nyquist = 0.5 / float(np.median(steps))
    df = 1.0 / (oversample * span)
    freqs = np.arange(1, int(nyquist / df) + 1) * df
    yc = y - np.mean(y)
    xs = np.exp(-2j * math.pi * np.outer(freqs, t)) @ yc
    k = int(np.argmax(np.abs(xs)))
    return float(freqs[k]), complex(xs[k])


def fit_sinusoid(t: np.ndarray, y: np.ndarray) -> FitResult:
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t.shape[0] < SINUSOID.n_params + 1:
        raise FitError(f"sinusoid fit needs >= {SINUSOID.n_params + 1} points, got {t.shape[0]}")
    order = np.argsort(t, kind="stable")
    t, y = t[order], y[order]
    mean = float(np.mean(y))
    if float(np.ptp(y)) <= 1e-12 * max(1.0, abs(mean)):
        logger.warning("constant data: sinusoid frequency is unidentifiable")
        return FitResult(
            SINUSOID.name,
            SINUSOID.param_names,
            np.array([0.0, 0.0, 0.0, mean]),
            np.zeros((4, 4)),
            0.0,
            0,
            False,
            (0.0,),
            ("degenerate",),
        )
    freq, xs = periodogram_peak(t, y)
    amp = 2.0 * abs(xs) / t.shape[0]
    phase = float(np.angle(1j * xs))
    return least_squares(SINUSOID, t, y, [amp, freq, phase, mean])


def fit_gaussian_centered(x: np.ndarray, y: np.ndarray) -> FitResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    height = float(y[np.argmin(np.abs(x))])
    # sigma from the point closest to half height
    k = int(np.argmin(np.abs(y - 0.5 * height)))
    sigma = abs(x[k]) / math.sqrt(2.0 * math.log(2.0)) if x[k] != 0 else float(np.ptp(x)) or 1.0
    return least_squares(GAUSSIAN_CENTERED, x, y, [height, sigma])


def fit_exponential(t: np.ndarray, y: np.ndarray, offset: bool = False) -> FitResult:
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    positive = y > 0
    if np.count_nonzero(positive) < 2:
        raise FitError("exponential fit needs at least two positive samples")
    slope, icpt = np.polyfit(t[positive], np.log(y[positive]), 1)
    if offset:
        return least_squares(EXPONENTIAL, t, y, [math.exp(icpt), -slope, 0.0])
    return least_squares(EXPONENTIAL_NO_OFFSET, t, y, [math.exp(icpt), -slope])


def fit_lorentzian_sum(x: np.ndarray, y: np.ndarray, init: Sequence[float]) -> FitResult:
    init = np.asarray(init, dtype=np.float64)
    if init.shape[0] % 3 != 0:
        raise ValueError("Lorentzian initial values come in (center, width, area) triples")
    return least_squares(lorentzian_sum_model(init.shape[0] // 3), x, y, init)
