"""
Scenario runner. Sweep points go to a bounded process pool; the calling
process is the single collector that writes every artifact, in sweep order.
"""

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Sequence, Tuple, Union

import polars as pl

from pyqme.errors import ConfigurationError, FitError, PhotonCountError, PyqmeError
from pyqme.analysis.calibration import ramsey_photon_calibration, rabi_calibration
from pyqme.analysis.energetics import energy_balance, ledger_frame
from pyqme.analysis.spectrum import (
    difference_spectrum,
    fit_triplet,
    photon_count_check,
    simulate_spectrum,
    transmitted_photons_vs_omega,
)
from pyqme.sim.model import drive_amplitude_for_photons
from pyqme.sim.utils import progress_iter
from .config import MHZ, Scenario

logger = logging.getLogger(__name__)

PHOTON_IDENTITY_TOL = 0.02
_PREP_NAMES = {"+": "plus", "-": "minus"}


class RunResult(NamedTuple):
    out_dir: Path
    artifacts: Dict[str, str]
    manifest: Path


def _tag(value: float) -> str:
    return f"{value:g}"


def _calibrate_job(scenario: Scenario, n_ref: float) -> float:
    base = scenario.model_for(0.0, n_target=n_ref)
    return drive_amplitude_for_photons(base, n_ref, dt=scenario.dt)


def _spectrum_job(scenario: Scenario, omega: float, eps: float, n_ref: float, prep: str):
    model = scenario.model_for(omega, eps, n_target=n_ref)
    traj, grid, spec = simulate_spectrum(
        model, prep, dt=scenario.dt, dt_c=scenario.dt_c, freqs_hz=scenario.freqs_hz, n_ref=n_ref
    )
    counts = photon_count_check(traj, grid, model.kappa)
    triplet = None
    if omega > 0:
        try:
            triplet = fit_triplet(spec, omega)
        except FitError as e:
            logger.warning(f"triplet fit failed (Omega/2pi = {omega / MHZ:g} MHz, |{prep}>): {e}")
    return spec, triplet, counts


def _photons_job(scenario: Scenario, eps: float, n_ref: float, prep: str) -> pl.DataFrame:
    model = scenario.model_for(0.0, eps, n_target=n_ref)
    return transmitted_photons_vs_omega(model, scenario.omegas, n_ref, prep, dt=scenario.dt)


def _ledger_job(scenario: Scenario, omega: float, eps: float, n_ref: float):
    model = scenario.model_for(omega, eps, n_target=n_ref)
    return energy_balance(
        model,
        preparations=scenario.preparations,
        dt=scenario.dt,
        dt_c=scenario.dt_c,
        n_ref=n_ref,
        strict=scenario.strict,
    )


def _ramsey_job(scenario: Scenario):
    amps = scenario.ramsey_amplitudes
    eps_max = max(amps) * MHZ
    model = scenario.model_for(0.0, n_target=scenario.estimated_photons(eps_max))
    return ramsey_photon_calibration(amps, model=model, epsilon_per_amplitude=MHZ, dt=scenario.dt)


def _rabi_job(scenario: Scenario):
    return rabi_calibration(scenario.rabi_amplitudes, omega_per_amplitude=MHZ, dt=scenario.dt)


def _calibration_job(scenario: Scenario, kind: str):
    return _rabi_job(scenario) if kind == "rabi" else _ramsey_job(scenario)


def _run_jobs(
    fn: Callable,
    jobs: Sequence[Tuple],
    labels: Sequence[str],
    workers: int,
    progress=None,
) -> List:
    """Results in job order, whatever order the workers finish in."""
    results = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(fn, *args) for args in jobs]
            for fut, label in zip(progress_iter(futures, progress=progress), labels):
                try:
                    results.append(fut.result())
                except PyqmeError as e:
                    logger.error(f"{label} failed: {e}")
                    raise
        return results
    for args, label in zip(progress_iter(jobs, progress=progress), labels):
        try:
            results.append(fn(*args))
        except PyqmeError as e:
            logger.error(f"{label} failed: {e}")
            raise
    return results


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class _Collector:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: List[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out_dir / name

    def write_frame(self, name: str, frame: pl.DataFrame) -> None:
        frame.write_csv(self.path(name))


def run_scenario(
    scenario: Scenario,
    out_dir: Union[str, Path],
    workers: int = 1,
    progress=None,
) -> RunResult:
    problems = scenario.validate()
    if problems:
        raise ConfigurationError(f"scenario {scenario.name!r} is invalid: " + "; ".join(problems))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = _Collector(out_dir)
    name = scenario.name
    logger.info(f"running scenario {name} with tasks {', '.join(scenario.tasks)} ({workers} worker(s))")

    epsilons: Dict[float, float] = {}
    checks: Dict[str, float] = {}
    if any(t in scenario.tasks for t in ("spectra", "photons", "ledger")):
        values = _run_jobs(
            _calibrate_job,
            [(scenario, n) for n in scenario.n_refs],
            [f"{name}: probe calibration N_ref = {n:g}" for n in scenario.n_refs],
            workers,
        )
        epsilons = dict(zip(scenario.n_refs, values))
        for n, eps in epsilons.items():
            logger.info(f"N_ref = {n:g}: eps = {eps:.6e} rad/s")

    if "spectra" in scenario.tasks:
        keys = [
            (omega, n, prep)
            for n in scenario.n_refs
            for omega in scenario.omegas
            for prep in scenario.preparations
        ]
        results = _run_jobs(
            _spectrum_job,
            [(scenario, omega, epsilons[n], n, prep) for omega, n, prep in keys],
            [f"{name}: spectrum Omega/2pi = {o / MHZ:g} MHz, N_ref = {n:g}, |{p}>" for o, n, p in keys],
            workers,
            progress,
        )
        by_key = dict(zip(keys, results))
        for (omega, n, prep), (spec, triplet, (spectral, direct)) in by_key.items():
            stem = f"nref{_tag(n)}_omega{_tag(omega / MHZ)}MHz_{_PREP_NAMES[prep]}"
            spec.write_csv(out.path(f"spectrum_{stem}.csv"))
            if triplet is not None:
                triplet.write_json(out.path(f"triplet_{stem}.json"))
            if direct > 0 and abs(spectral / direct - 1.0) > PHOTON_IDENTITY_TOL:
                message = f"{stem}: spectral photon count {spectral:.6g} vs kappa*int<n> = {direct:.6g}"
                if scenario.strict:
                    raise PhotonCountError(message)
                logger.warning(message)
                checks[f"photon_count_{stem}"] = spectral / direct
        if set(scenario.preparations) == {"+", "-"}:
            for n in scenario.n_refs:
                for omega in scenario.omegas:
                    diff = difference_spectrum(by_key[(omega, n, "-")][0], by_key[(omega, n, "+")][0])
                    stem = f"nref{_tag(n)}_omega{_tag(omega / MHZ)}MHz"
                    diff.write_csv(out.path(f"difference_{stem}.csv"))

    if "photons" in scenario.tasks:
        keys = [(n, prep) for n in scenario.n_refs for prep in scenario.preparations]
        frames = _run_jobs(
            _photons_job,
            [(scenario, epsilons[n], n, prep) for n, prep in keys],
            [f"{name}: N(Omega) at N_ref = {n:g}, |{p}>" for n, p in keys],
            workers,
            progress,
        )
        for n in scenario.n_refs:
            rows = [f for (kn, _), f in zip(keys, frames) if kn == n]
            out.write_frame(f"photons_vs_omega_nref{_tag(n)}.csv", pl.concat(rows))

    if "ledger" in scenario.tasks:
        keys = [(omega, n) for n in scenario.n_refs for omega in scenario.omegas]
        ledgers = _run_jobs(
            _ledger_job,
            [(scenario, omega, epsilons[n], n) for omega, n in keys],
            [f"{name}: ledger Omega/2pi = {o / MHZ:g} MHz, N_ref = {n:g}" for o, n in keys],
            workers,
            progress,
        )
        out.write_frame("ledger.csv", ledger_frame(ledgers))
        out.write_frame(
            "ledger_preparations.csv", pl.concat([ledger.preparation_frame() for ledger in ledgers])
        )

    if "calibration" in scenario.tasks:
        rabi, ramsey = _run_jobs(
            _calibration_job,
            [(scenario, "rabi"), (scenario, "ramsey")],
            [f"{name}: Rabi calibration", f"{name}: Ramsey calibration"],
            workers,
        )
        rabi.write_csv(out.path("calibration_rabi.csv"))
        ramsey.write_csv(out.path("calibration_ramsey.csv"))

    artifacts = {f: _sha256(out_dir / f) for f in sorted(out.files)}
    manifest = out_dir / "manifest.ini"
    manifest.write_text(_manifest_text(scenario, epsilons, artifacts, checks))
    logger.info(f"{name}: wrote {len(artifacts)} artifact(s) and {manifest.name}")
    return RunResult(out_dir, artifacts, manifest)


def _manifest_text(
    scenario: Scenario,
    epsilons: Dict[float, float],
    artifacts: Dict[str, str],
    checks: Dict[str, float] = None,
) -> str:
    lines = [scenario.to_ini().rstrip("\n"), ""]
    if epsilons:
        lines.append("[calibrated]")
        lines += [f"epsilon_nref{_tag(n)} = {eps!r}" for n, eps in epsilons.items()]
        lines.append("")
    if checks:
        # spectral / direct photon-count ratios outside PHOTON_IDENTITY_TOL
        lines.append("[checks]")
        lines += [f"{key} = {ratio!r}" for key, ratio in checks.items()]
        lines.append("")
    lines.append("[artifacts]")
    lines += [f"{name} = sha256:{digest}" for name, digest in artifacts.items()]
    return "\n".join(lines) + "\n"
