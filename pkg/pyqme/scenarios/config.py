"""
Scenario files: flat INI (``key = value`` inside ``[section]``), physical
inputs in MHz and microseconds. Parsed into SI angular units here; nothing
downstream sees MHz.
"""

import io
import math
import logging
import configparser
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from pyqme.errors import ConfigurationError
from pyqme.sim.correlation import check_nyquist
from pyqme.sim.hilbert import default_n_max
from pyqme.sim.model import PulseSchedule, SystemModel, TWO_PI, check_time_step
from pyqme.analysis.spectrum import frequency_grid

logger = logging.getLogger(__name__)

MHZ = TWO_PI * 1e6
US = 1e-6
NS = 1e-9

KNOWN_TASKS = ("spectra", "photons", "ledger", "calibration")
# written by the runner into manifests, skipped when a manifest is re-run
IGNORED_SECTIONS = ("artifacts", "calibrated", "checks")

DEFAULTS: Dict[str, Dict[str, str]] = {
    "scenario": {"name": "", "description": "", "tasks": "spectra", "base": ""},
    "model": {
        "chi_mhz": "-4.0",
        "kappa_mhz": "0.9",
        "kappa_a_fraction": "0.1",
        "t1_us": "13.5",
        "t2_star_us": "2.5",
        "decoherence": "true",
        "n_max": "auto",
        "qubit_freq_ghz": "5.0178",
        "cavity_g_ghz": "5.6959",
        "cavity_e_ghz": "5.7039",
    },
    "schedule": {
        "drive_start_us": "0",
        "drive_duration_us": "3",
        "probe_start_us": "0",
        "probe_duration_us": "2",
        "record_us": "3",
    },
    "sweep": {"omega_mhz": "3", "n_ref": "0.2", "preparations": "+, -"},
    "numerics": {
        "dt_ns": "1",
        "dtc_ns": "25",
        "f_span_mhz": "10",
        "n_points": "401",
        "strict": "true",
    },
    "calibration": {"rabi_amplitudes": "0, 1, 2, 3, 4", "ramsey_amplitudes": "0.5, 1, 1.5, 2"},
}


def _find_lineno(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None:
            name = line.split("=", 1)[0].strip()
            if name == key and "=" in line:
                return i
    return None


def _split(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str = ""
    tasks: Tuple[str, ...] = ("spectra",)
    chi: float = -4.0 * MHZ
    kappa: float = 0.9 * MHZ
    kappa_a_fraction: float = 0.1
    t1: float = 13.5 * US
    t2_star: float = 2.5 * US
    decoherence_enabled: bool = True
    n_max: Optional[int] = None
    schedule: PulseSchedule = field(default_factory=PulseSchedule)
    omegas: Tuple[float, ...] = (3.0 * MHZ,)
    n_refs: Tuple[float, ...] = (0.2,)
    preparations: Tuple[str, ...] = ("+", "-")
    dt: float = 1.0 * NS
    dt_c: float = 25.0 * NS
    f_span: float = 10e6
    n_points: int = 401
    strict: bool = True
    rabi_amplitudes: Tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0)
    ramsey_amplitudes: Tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    qubit_freq_hz: float = 5.0178e9
    cavity_g_hz: float = 5.6959e9
    cavity_e_hz: float = 5.7039e9

    @property
    def freqs_hz(self) -> np.ndarray:
        return frequency_grid(self.f_span, self.n_points)

    def with_overrides(self, **changes) -> "Scenario":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def model_for(self, omega: float, epsilon: complex = 0.0, n_target: float = 1.0) -> SystemModel:
        return SystemModel.create(
            omega,
            epsilon=epsilon,
            kappa_a_fraction=self.kappa_a_fraction,
            kappa=self.kappa,
            n_max=self.n_max,
            n_target=n_target,
            chi=self.chi,
            t1=self.t1,
            t2_star=self.t2_star,
            schedule=self.schedule,
            decoherence_enabled=self.decoherence_enabled,
            qubit_freq_hz=self.qubit_freq_hz,
            cavity_g_hz=self.cavity_g_hz,
            cavity_e_hz=self.cavity_e_hz,
        )

    def estimated_epsilon(self, n_ref: float) -> float:
        """Steady-state guess of the probe amplitude emitting n_ref photons at Omega = 0."""
        kappa_b = (1.0 - self.kappa_a_fraction) * self.kappa
        duration = self.schedule.probe_duration
        if n_ref <= 0 or kappa_b <= 0 or duration <= 0:
            return 0.0
        n_cav = n_ref / (kappa_b * duration)
        return math.sqrt(n_cav * ((0.5 * self.kappa) ** 2 + self.chi**2))

    def estimated_photons(self, epsilon: float) -> float:
        """Inverse of estimated_epsilon."""
        kappa_b = (1.0 - self.kappa_a_fraction) * self.kappa
        n_cav = epsilon**2 / ((0.5 * self.kappa) ** 2 + self.chi**2)
        return kappa_b * self.schedule.probe_duration * n_cav

    def validate(self) -> List[str]:
        """Schema and physics-range problems, without running any simulation."""
        problems = []
        if not self.tasks:
            problems.append("no tasks requested")
        if not self.omegas:
            problems.append("sweep.omega_mhz is empty")
        if not self.n_refs and any(t in self.tasks for t in ("spectra", "photons", "ledger")):
            problems.append("sweep.n_ref is empty")
        if not self.preparations:
            problems.append("sweep.preparations is empty")
        if "calibration" in self.tasks and not (self.rabi_amplitudes and self.ramsey_amplitudes):
            problems.append("calibration amplitude lists must be non-empty")
        try:
            check_nyquist(self.dt_c, self.f_span)
        except ConfigurationError as e:
            problems.append(str(e))
        try:
            self.schedule.validate()
        except ConfigurationError as e:
            problems.append(str(e))
        if problems:
            return problems

        for n_ref in self.n_refs or (1.0,):
            eps = self.estimated_epsilon(n_ref)
            n_cav = n_ref / max((1.0 - self.kappa_a_fraction) * self.kappa * self.schedule.probe_duration, 1e-30)
            if self.n_max is not None and self.n_max < default_n_max(n_cav):
                problems.append(
                    f"n_max = {self.n_max} is below the truncation heuristic "
                    f"{default_n_max(n_cav)} for N_ref = {n_ref}"
                )
            for omega in self.omegas:
                try:
                    model = self.model_for(omega, eps, n_target=n_ref)
                    check_time_step(model, self.dt)
                except ConfigurationError as e:
                    problems.append(f"Omega/2pi = {omega / MHZ:g} MHz, N_ref = {n_ref:g}: {e}")
        if self.dt_c < self.dt or abs(self.dt_c / self.dt - round(self.dt_c / self.dt)) > 1e-6:
            problems.append(f"dtc_ns = {self.dt_c / NS:g} must be a multiple of dt_ns = {self.dt / NS:g}")
        return sorted(set(problems), key=problems.index)

    def to_ini(self) -> str:
        """Canonical scenario text; parsing it reproduces this scenario."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str

        def fmt(v: float) -> str:
            return repr(float(v))

        parser["scenario"] = {
            "name": self.name,
            "description": self.description,
            "tasks": ", ".join(self.tasks),
        }
        parser["model"] = {
            "chi_mhz": fmt(self.chi / MHZ),
            "kappa_mhz": fmt(self.kappa / MHZ),
            "kappa_a_fraction": fmt(self.kappa_a_fraction),
            "t1_us": fmt(self.t1 / US),
            "t2_star_us": fmt(self.t2_star / US),
            "decoherence": "true" if self.decoherence_enabled else "false",
            "n_max": "auto" if self.n_max is None else str(self.n_max),
            "qubit_freq_ghz": fmt(self.qubit_freq_hz / 1e9),
            "cavity_g_ghz": fmt(self.cavity_g_hz / 1e9),
            "cavity_e_ghz": fmt(self.cavity_e_hz / 1e9),
        }
        s = self.schedule
        parser["schedule"] = {
            "drive_start_us": fmt(s.drive_start / US),
            "drive_duration_us": fmt(s.drive_duration / US),
            "probe_start_us": fmt(s.probe_start / US),
            "probe_duration_us": fmt(s.probe_duration / US),
            "record_us": fmt(s.record_duration / US),
        }
        parser["sweep"] = {
            "omega_mhz": ", ".join(fmt(w / MHZ) for w in self.omegas),
            "n_ref": ", ".join(fmt(n) for n in self.n_refs),
            "preparations": ", ".join(self.preparations),
        }
        parser["numerics"] = {
            "dt_ns": fmt(self.dt / NS),
            "dtc_ns": fmt(self.dt_c / NS),
            "f_span_mhz": fmt(self.f_span / 1e6),
            "n_points": str(self.n_points),
            "strict": "true" if self.strict else "false",
        }
        parser["calibration"] = {
            "rabi_amplitudes": ", ".join(fmt(a) for a in self.rabi_amplitudes),
            "ramsey_amplitudes": ", ".join(fmt(a) for a in self.ramsey_amplitudes),
        }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


class ValidationReport(NamedTuple):
    name: str
    problems: Tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.problems

    def format(self) -> str:
        if self.ok:
            return f"{self.name}: OK"
        return "\n".join([f"{self.name}: {len(self.problems)} problem(s)"] + [f"  - {p}" for p in self.problems])


def _read(parser: configparser.ConfigParser, text: str, source: str) -> None:
    try:
        parser.read_string(text, source=source)
    # MissingSectionHeaderError subclasses ParsingError
    except configparser.MissingSectionHeaderError as e:
        raise ConfigurationError(f"{source}: missing [section] header", e.lineno) from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ConfigurationError(f"{source}: malformed line", lineno) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigurationError(f"{source}: {e.message}", e.lineno) from None


def _base_of(text: str, source: str) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    _read(parser, text, source)
    return parser.get("scenario", "base", fallback="").strip()


def parse_scenario(
    text: str,
    source: str = "<scenario>",
    resolve_base: Optional[Callable[[str], str]] = None,
) -> Scenario:
    """
    Parse scenario text. ``resolve_base`` maps a ``base =`` name to its text;
    the chain is applied oldest first and this text last.
    """
    chain = [(text, source)]
    seen = set()
    base = _base_of(text, source)
    while base:
        if base in seen:
            raise ConfigurationError(f"{source}: circular base chain through {base!r}")
        if resolve_base is None:
            raise ConfigurationError(
                f"{source}: base {base!r} given but no resolver", _find_lineno(text, "scenario", "base")
            )
        seen.add(base)
        base_text = resolve_base(base)
        chain.append((base_text, base))
        base = _base_of(base_text, base)

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_dict(DEFAULTS)
    for t, src in reversed(chain):
        _read(parser, t, src)

    def locate(section: str, key: Optional[str] = None) -> Optional[int]:
        for t, _ in chain:
            n = _find_lineno(t, section, key)
            if n is not None:
                return n
        return None

    for section in parser.sections():
        if section in IGNORED_SECTIONS:
            continue
        if section not in DEFAULTS:
            raise ConfigurationError(
                f"{source}: unknown section [{section}]. Supported: {', '.join(DEFAULTS)}",
                locate(section),
            )
        for key in parser[section]:
            if key not in DEFAULTS[section]:
                raise ConfigurationError(
                    f"{source}: unknown key {key!r} in [{section}]", locate(section, key)
                )

    def get_float(section: str, key: str) -> float:
        raw = parser.get(section, key)
        try:
            value = float(raw)
        except ValueError:
            raise ConfigurationError(
                f"{source}: [{section}] {key} = {raw!r} is not a number", locate(section, key)
            ) from None
        if not math.isfinite(value):
            raise ConfigurationError(f"{source}: [{section}] {key} must be finite", locate(section, key))
        return value

    def get_floats(section: str, key: str) -> Tuple[float, ...]:
        out = []
        for item in _split(parser.get(section, key)):
            try:
                out.append(float(item))
            except ValueError:
                raise ConfigurationError(
                    f"{source}: [{section}] {key}: {item!r} is not a number", locate(section, key)
                ) from None
        return tuple(out)

    def get_bool(section: str, key: str) -> bool:
        try:
            return parser.getboolean(section, key)
        except ValueError:
            raise ConfigurationError(
                f"{source}: [{section}] {key} must be true or false", locate(section, key)
            ) from None

    name = parser.get("scenario", "name").strip()
    if not name:
        raise ConfigurationError(f"{source}: [scenario] name is required", locate("scenario"))
    tasks = tuple(_split(parser.get("scenario", "tasks")))
    for task in tasks:
        if task not in KNOWN_TASKS:
            raise ConfigurationError(
                f"{source}: unknown task {task!r}. Supported: {', '.join(KNOWN_TASKS)}",
                locate("scenario", "tasks"),
            )
    preparations = tuple(_split(parser.get("sweep", "preparations")))
    for prep in preparations:
        if prep not in ("+", "-"):
            raise ConfigurationError(
                f"{source}: unknown preparation {prep!r}. Supported: +, -",
                locate("sweep", "preparations"),
            )

    raw_n_max = parser.get("model", "n_max").strip().lower()
    if raw_n_max == "auto":
        n_max = None
    else:
        try:
            n_max = int(raw_n_max)
        except ValueError:
            raise ConfigurationError(
                f"{source}: [model] n_max must be an integer or auto", locate("model", "n_max")
            ) from None

    n_points = get_float("numerics", "n_points")
    if n_points != int(n_points) or n_points < 3:
        raise ConfigurationError(
            f"{source}: [numerics] n_points must be an integer >= 3", locate("numerics", "n_points")
        )

    schedule = PulseSchedule(
        get_float("schedule", "drive_start_us") * US,
        get_float("schedule", "drive_duration_us") * US,
        get_float("schedule", "probe_start_us") * US,
        get_float("schedule", "probe_duration_us") * US,
        get_float("schedule", "record_us") * US,
    )
    omegas = get_floats("sweep", "omega_mhz")
    n_refs = get_floats("sweep", "n_ref")
    if not omegas:
        raise ConfigurationError(f"{source}: [sweep] omega_mhz is empty", locate("sweep", "omega_mhz"))
    if "calibration" not in tasks and not n_refs:
        raise ConfigurationError(f"{source}: [sweep] n_ref is empty", locate("sweep", "n_ref"))
    if any(w < 0 for w in omegas) or any(n < 0 for n in n_refs):
        raise ConfigurationError(f"{source}: sweep values must be >= 0", locate("sweep"))

    return Scenario(
        name=name,
        description=parser.get("scenario", "description").strip(),
        tasks=tasks,
        chi=get_float("model", "chi_mhz") * MHZ,
        kappa=get_float("model", "kappa_mhz") * MHZ,
        kappa_a_fraction=get_float("model", "kappa_a_fraction"),
        t1=get_float("model", "t1_us") * US,
        t2_star=get_float("model", "t2_star_us") * US,
        decoherence_enabled=get_bool("model", "decoherence"),
        n_max=n_max,
        schedule=schedule,
        omegas=tuple(w * MHZ for w in omegas),
        n_refs=n_refs,
        preparations=preparations,
        dt=get_float("numerics", "dt_ns") * NS,
        dt_c=get_float("numerics", "dtc_ns") * NS,
        f_span=get_float("numerics", "f_span_mhz") * 1e6,
        n_points=int(n_points),
        strict=get_bool("numerics", "strict"),
        rabi_amplitudes=get_floats("calibration", "rabi_amplitudes"),
        ramsey_amplitudes=get_floats("calibration", "ramsey_amplitudes"),
        qubit_freq_hz=get_float("model", "qubit_freq_ghz") * 1e9,
        cavity_g_hz=get_float("model", "cavity_g_ghz") * 1e9,
        cavity_e_hz=get_float("model", "cavity_e_ghz") * 1e9,
    )
