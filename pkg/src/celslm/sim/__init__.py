"""Discrete-event edge/cloud serving simulator."""
from .engine import MODES, Simulation, resolve_split, run, sweep
from .metrics import MetricsReport, RequestRecord, sweep_csv
from .scenario import Scenario, ScenarioError, build_scenario

__all__ = [
    "MODES", "Simulation", "resolve_split", "run", "sweep",
    "MetricsReport", "RequestRecord", "sweep_csv",
    "Scenario", "ScenarioError", "build_scenario",
]
