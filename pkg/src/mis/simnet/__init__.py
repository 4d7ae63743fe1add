"""Deterministic discrete-event simulator for a consortium of registry nodes."""

from .config import (
    ConfigInvalid,
    CostModel,
    LatencyModel,
    LinkSpec,
    NodeSpec,
    Scenario,
    SimConfig,
    WorkloadSpec,
    bundled_scenario,
    load_scenario,
    make_nodes,
    scenario_from_json,
)
from .faults import Behavior, FaultPlan, Kind, UnknownNode, inject
from .metrics import CSV_HEADER, MetricsReport, RoundRow
from .runner import EventLoop, SafetyViolation, SimResult, Simulation, run

__all__ = [
    "Behavior", "CSV_HEADER", "ConfigInvalid", "CostModel", "EventLoop", "FaultPlan", "Kind",
    "LatencyModel", "LinkSpec", "MetricsReport", "NodeSpec", "RoundRow", "SafetyViolation",
    "Scenario", "SimConfig", "SimResult", "Simulation", "UnknownNode", "WorkloadSpec",
    "bundled_scenario", "inject", "load_scenario", "make_nodes", "run", "scenario_from_json",
]
