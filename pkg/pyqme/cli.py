import sys
import logging
import argparse
from pathlib import Path
from typing import List, Optional

from pyqme.errors import PyqmeError
from pyqme.scenarios.config import NS, ValidationReport
from pyqme.scenarios.factory import ScenarioFactory
from pyqme.scenarios.runner import run_scenario

logger = logging.getLogger("pyqme")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyqme",
        description="Simulate and account for the energy exchanged while measuring a driven qubit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its artifacts")
    run.add_argument("config", help="scenario file or built-in scenario name")
    run.add_argument("--out-dir", type=Path, default=None, help="output directory (default: out/<name>)")
    run.add_argument("--workers", type=int, default=1, help="worker processes for sweep points")
    run.add_argument("--dt-ns", type=float, default=None, help="override the integration step")
    run.add_argument("--dtc-ns", type=float, default=None, help="override the correlator grid step")
    run.add_argument("--progress", action="store_true", help="show a progress bar")

    validate = sub.add_parser("validate", help="check scenarios without simulating")
    validate.add_argument("config", nargs="+", help="scenario files or built-in scenario names")

    sub.add_parser("list-scenarios", help="list the built-in scenarios")
    return parser


def _load(config: str, dt_ns: Optional[float] = None, dtc_ns: Optional[float] = None):
    scenario = ScenarioFactory.get_scenario(config)
    return scenario.with_overrides(
        dt=None if dt_ns is None else dt_ns * NS,
        dt_c=None if dtc_ns is None else dtc_ns * NS,
    )


def _cmd_run(args) -> int:
    if args.workers < 1:
        logger.error(f"--workers must be >= 1, got {args.workers}")
        return 2
    scenario = _load(args.config, args.dt_ns, args.dtc_ns)
    out_dir = args.out_dir or Path("out") / scenario.name
    result = run_scenario(scenario, out_dir, workers=args.workers, progress=True if args.progress else None)
    print(f"{scenario.name}: {len(result.artifacts)} artifact(s) in {result.out_dir}")
    return 0


def _cmd_validate(args) -> int:
    failed = 0
    for config in args.config:
        try:
            scenario = _load(config)
            report = ValidationReport(scenario.name, tuple(scenario.validate()))
        except PyqmeError as e:
            report = ValidationReport(config, (str(e),))
        print(report.format())
        failed += not report.ok
    return 1 if failed else 0


def _cmd_list(args) -> int:
    for name in ScenarioFactory.builtin_names():
        scenario = ScenarioFactory.get_scenario(name)
        print(f"{name:<14} {scenario.description}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    commands = {"run": _cmd_run, "validate": _cmd_validate, "list-scenarios": _cmd_list}
    try:
        return commands[args.command](args)
    except PyqmeError as e:
        logger.error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
