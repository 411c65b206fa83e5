"""Discrete-event simulation of a whole grid."""

from .engine import Simulation, SimResult, run
from .metrics import MetricsReport
from .scenario import InvalidScenario, Scenario, bundled, load_scenario, parse_scenario

__all__ = [
    "InvalidScenario",
    "MetricsReport",
    "Scenario",
    "SimResult",
    "Simulation",
    "bundled",
    "load_scenario",
    "parse_scenario",
    "run",
]
