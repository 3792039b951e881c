# scenarios/__init__.py
from .config import Scenario, parse_scenario
from .factory import ScenarioFactory
from .runner import RunResult, run_scenario

get_scenario = ScenarioFactory.get_scenario

__all__ = ["Scenario", "ScenarioFactory", "RunResult", "get_scenario", "parse_scenario", "run_scenario"]
