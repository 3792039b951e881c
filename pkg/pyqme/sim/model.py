"""
Physical model of the driven qubit dispersively coupled to a two-port cavity.

Frame: doubly rotating frame, qubit at its drive, cavity at the probe carrier
placed midway between the two dressed cavity resonances. Frequencies are
angular (rad/s), times in seconds.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import NamedTuple, List, Dict

import numpy as np

from pyqme.errors import ConfigurationError, CalibrationError
from pyqme.sim.hilbert import (
    HilbertSpec,
    Operator,
    annihilation,
    number,
    qubit_operators,
    default_n_max,
)
from pyqme.sim.utils import steps_in

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# measured device values (lab frame entries are metadata only)
DEVICE_CHI = TWO_PI * -4.0e6
DEVICE_KAPPA = TWO_PI * 0.9e6
DEVICE_T1 = 13.5e-6
DEVICE_T2_STAR = 2.5e-6
DEVICE_QUBIT_FREQ_HZ = 5.0178e9
DEVICE_CAVITY_G_HZ = 5.6959e9
DEVICE_CAVITY_E_HZ = 5.7039e9
DEFAULT_KAPPA_A_FRACTION = 0.1

STANDARD_PHOTON_NUMBERS = (0.2, 0.8, 1.9, 3.4)

# step-size guards, see check_time_step
ACCURACY_CYCLES_PER_STEP = 0.02
RK4_STABILITY_LIMIT = 2.5


class PulseSchedule(NamedTuple):
    drive_start: float = 0.0
    drive_duration: float = 3e-6
    probe_start: float = 0.0
    probe_duration: float = 2e-6
    record_duration: float = 3e-6

    @property
    def drive_end(self) -> float:
        return self.drive_start + self.drive_duration

    @property
    def probe_end(self) -> float:
        return self.probe_start + self.probe_duration

    def validate(self) -> "PulseSchedule":
        for name, value in self._asdict().items():
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")
        if self.record_duration < self.probe_end * (1 - 1e-12):
            raise ConfigurationError(
                f"record_duration {self.record_duration:.3e} s ends before the probe "
                f"pulse ({self.probe_end:.3e} s)"
            )
        return self

    def drive_on(self, t: float) -> bool:
        return self.drive_start <= t < self.drive_end

    def probe_on(self, t: float) -> bool:
        return self.probe_start <= t < self.probe_end


def segment_edges(schedule: PulseSchedule) -> np.ndarray:
    """Sorted times in [0, record_duration] where the generator may change."""
    tau = schedule.record_duration
    edges = {0.0, tau}
    for t in (
        schedule.drive_start,
        schedule.drive_end,
        schedule.probe_start,
        schedule.probe_end,
    ):
        if 0.0 < t < tau:
            edges.add(float(t))
    return np.array(sorted(edges))


@dataclass(frozen=True)
class SystemModel:
    omega: float
    chi: float = DEVICE_CHI
    kappa: float = DEVICE_KAPPA
    kappa_a: float = DEFAULT_KAPPA_A_FRACTION * DEVICE_KAPPA
    kappa_b: float = (1.0 - DEFAULT_KAPPA_A_FRACTION) * DEVICE_KAPPA
    t1: float = DEVICE_T1
    t2_star: float = DEVICE_T2_STAR
    epsilon: complex = 0.0
    schedule: PulseSchedule = field(default_factory=PulseSchedule)
    spec: HilbertSpec = field(default_factory=lambda: HilbertSpec(default_n_max(1.0)))
    decoherence_enabled: bool = True
    qubit_freq_hz: float = DEVICE_QUBIT_FREQ_HZ
    cavity_g_hz: float = DEVICE_CAVITY_G_HZ
    cavity_e_hz: float = DEVICE_CAVITY_E_HZ

    def __post_init__(self):
        object.__setattr__(self, "epsilon", complex(self.epsilon))
        HilbertSpec.create(self.spec.n_max)
        self.schedule.validate()
        for name in ("omega", "chi", "kappa", "kappa_a", "kappa_b"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        if self.omega < 0:
            raise ConfigurationError(f"omega must be >= 0, got {self.omega}")
        if self.kappa_a < 0 or self.kappa_b < 0:
            raise ConfigurationError("port rates kappa_a, kappa_b must be >= 0")
        if abs(self.kappa_a + self.kappa_b - self.kappa) > 1e-9 * max(self.kappa, 1.0):
            raise ConfigurationError(
                f"kappa_a + kappa_b = {self.kappa_a + self.kappa_b:.6e} "
                f"differs from kappa = {self.kappa:.6e}"
            )
        if self.decoherence_enabled:
            if self.t1 <= 0 or self.t2_star <= 0:
                raise ConfigurationError("T1 and T2* must be > 0")
            if self.dephasing_rate < 0:
                raise ConfigurationError(
                    f"T2* = {self.t2_star:.3e} s exceeds 2*T1 = {2 * self.t1:.3e} s: "
                    f"pure-dephasing rate gamma_phi = {self.dephasing_rate:.3e} 1/s < 0"
                )

    @classmethod
    def create(
        cls,
        omega: float,
        epsilon: complex = 0.0,
        kappa_a_fraction: float = DEFAULT_KAPPA_A_FRACTION,
        kappa: float = DEVICE_KAPPA,
        n_max: int = None,
        n_target: float = 1.0,
        **kwargs,
    ) -> "SystemModel":
        if not 0.0 <= kappa_a_fraction <= 1.0:
            raise ConfigurationError(
                f"kappa_a_fraction must lie in [0, 1], got {kappa_a_fraction}"
            )
        if n_max is None:
            n_max = default_n_max(n_target)
        return cls(
            omega=omega,
            epsilon=epsilon,
            kappa=kappa,
            kappa_a=kappa_a_fraction * kappa,
            kappa_b=(1.0 - kappa_a_fraction) * kappa,
            spec=HilbertSpec.create(n_max),
            **kwargs,
        )

    def with_updates(self, **changes) -> "SystemModel":
        return replace(self, **changes)

    @property
    def dephasing_rate(self) -> float:
        """gamma_phi = 1/T2* - 1/(2 T1)."""
        return 1.0 / self.t2_star - 0.5 / self.t1

    @property
    def port_factor(self) -> float:
        """(1 + kappa_a/kappa_b), the total-to-output photon ratio."""
        return self.kappa / self.kappa_b

    @property
    def model_id(self) -> str:
        mode = "deco" if self.decoherence_enabled else "ideal"
        return (
            f"omega={self.omega / TWO_PI / 1e6:.6g}MHz;chi={self.chi / TWO_PI / 1e6:.6g}MHz;"
            f"kappa={self.kappa / TWO_PI / 1e6:.6g}MHz;kA/k={self.kappa_a / self.kappa:.6g};"
            f"eps={self.epsilon.real:.6g}{self.epsilon.imag:+.6g}j;n_max={self.spec.n_max};{mode}"
        )


@lru_cache(maxsize=32)
def _operators(spec: HilbertSpec) -> Dict[str, np.ndarray]:
    ops = {k: v.matrix for k, v in qubit_operators(spec).items()}
    a = annihilation(spec).matrix
    ops["a"] = a
    ops["adag"] = a.conj().T.copy()
    ops["n"] = number(spec).matrix
    ops["n_sz"] = ops["n"] @ ops["sz"]
    for m in ops.values():
        m.flags.writeable = False
    return ops


def system_hamiltonian(model: SystemModel) -> Operator:
    """H_S = (Omega/2) sx + chi a^dag a sz, the drive-free system energy."""
    ops = _operators(model.spec)
    return Operator(0.5 * model.omega * ops["sx"] + model.chi * ops["n_sz"], "H_S")


def hamiltonian(model: SystemModel, t: float) -> Operator:
    ops = _operators(model.spec)
    h = model.chi * ops["n_sz"]
    if model.schedule.drive_on(t):
        h = h + 0.5 * model.omega * ops["sx"]
    if model.schedule.probe_on(t) and model.epsilon != 0:
        eps = model.epsilon
        h = h + eps * ops["adag"] + np.conj(eps) * ops["a"]
    return Operator(h, f"H({t:.3e})")


def collapse_operators(model: SystemModel) -> List[Operator]:
    ops = _operators(model.spec)
    out = [Operator(math.sqrt(model.kappa) * ops["a"], "sqrt(kappa) a")]
    if not model.decoherence_enabled:
        return out
    gamma_phi = model.dephasing_rate
    if gamma_phi < 0:
        raise ConfigurationError(f"negative pure-dephasing rate {gamma_phi:.3e} 1/s")
    out.append(Operator(math.sqrt(1.0 / model.t1) * ops["sm"], "sqrt(1/T1) sm"))
    out.append(Operator(math.sqrt(0.5 * gamma_phi) * ops["sz"], "sqrt(gphi/2) sz"))
    return out


def check_time_step(model: SystemModel, dt: float) -> None:
    """
    Accuracy: dt * max(Omega, |chi|, kappa, |eps|) / 2pi <= 0.02.
    Stability (RK4): dt * (2 |chi| n_max + Omega + kappa n_max) <= 2.5.
    Pulse edges must fall on the dt grid.
    """
    if not dt > 0:
        raise ConfigurationError(f"dt must be > 0, got {dt}")
    fastest = max(model.omega, abs(model.chi), model.kappa, abs(model.epsilon))
    if dt * fastest / TWO_PI > ACCURACY_CYCLES_PER_STEP:
        raise ConfigurationError(
            f"dt = {dt:.3e} s under-resolves the fastest rate {fastest:.3e} rad/s"
        )
    n_max = model.spec.n_max
    radius = 2.0 * abs(model.chi) * n_max + model.omega + model.kappa * n_max
    if dt * radius > RK4_STABILITY_LIMIT:
        raise ConfigurationError(
            f"dt = {dt:.3e} s exceeds the RK4 stability bound for n_max = {n_max} "
            f"(spectral radius {radius:.3e} rad/s)"
        )
    for t in segment_edges(model.schedule):
        if steps_in(t, dt) is None:
            raise ConfigurationError(f"pulse edge {t:.6e} s is not a multiple of dt = {dt:.3e} s")


def drive_amplitude_for_photons(
    model: SystemModel,
    n_target: float,
    dt: float = 1e-9,
    rel_tol: float = 0.01,
    max_iter: int = 40,
) -> float:
    """
    Real probe amplitude eps such that, at Omega = 0 and the qubit in |g>, the
    number of photons emitted through the output port equals ``n_target``.
    """
    # local imports: lindblad and energetics depend on this module
    from pyqme.sim.lindblad import evolve
    from pyqme.sim.hilbert import product_state
    from pyqme.analysis.energetics import emitted_photons

    if n_target < 0:
        raise ValueError(f"n_target must be >= 0, got {n_target}")
    if n_target == 0:
        return 0.0

    base = model.with_updates(omega=0.0)
    rho0 = product_state(base.spec, "g", 0)

    def photons(eps: float) -> float:
        traj = evolve(base.with_updates(epsilon=eps), rho0, dt=dt, store_stride=0)
        return emitted_photons(traj, base.kappa_b)

    # the driven cavity is linear at Omega = 0: N grows as eps^2
    eps_ref = 0.1 * abs(base.chi) if base.chi != 0 else 0.1 * base.kappa
    n_ref = photons(eps_ref)
    if n_ref <= 0:
        raise CalibrationError("reference probe amplitude emits no photons")
    guess = eps_ref * math.sqrt(n_target / n_ref)
    n_guess = photons(guess)
    if abs(n_guess / n_target - 1.0) <= rel_tol:
        logger.info(f"eps = {guess:.6e} rad/s for N = {n_target} (N_sim = {n_guess:.6f})")
        return guess

    lo, hi = 0.0, guess
    n_hi = n_guess
    for _ in range(max_iter):
        if n_hi >= n_target:
            break
        lo, hi = hi, 2.0 * hi
        n_hi = photons(hi)
    else:
        raise CalibrationError(f"could not bracket N = {n_target}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        n_mid = photons(mid)
        if abs(n_mid / n_target - 1.0) <= rel_tol:
            logger.info(f"eps = {mid:.6e} rad/s for N = {n_target} (N_sim = {n_mid:.6f})")
            return mid
        if n_mid < n_target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"probe amplitude bisection did not reach N = {n_target} within {max_iter} steps"
    )
