"""Scenarios, simulated actors, reports and policy comparison."""

from .report import (
    ChainUsage,
    ComparisonMatrix,
    ScenarioReport,
    compare_policies,
    emit_report,
    render,
    run_scenario,
    run_with_trace,
)
from .scenario import (
    ParseError,
    Scenario,
    ScenarioError,
    ValidationError,
    dump_scenario,
    load_scenario,
    scenario_from_dict,
)
from .world import World, run_world

__all__ = [
    "ChainUsage", "ComparisonMatrix", "ParseError", "Scenario", "ScenarioError",
    "ScenarioReport", "ValidationError", "World", "compare_policies", "dump_scenario",
    "emit_report", "load_scenario", "render", "run_scenario", "run_with_trace",
    "run_world", "scenario_from_dict",
]
