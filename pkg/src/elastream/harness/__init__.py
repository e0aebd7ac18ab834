"""Scenario harness: configuration, simulated runs, the reference oracle and reports."""

from .engine import Engine, EngineResult
from .oracle import OracleResult, oracle_run
from .report import LogDiff, RunReport, diff_logs
from .runner import RunOutcome, run_scenario, sweep
from .scenario import ConfigError, MigrationSpec, Scenario, load_scenario, parse_scenario

__all__ = [
    "ConfigError", "Engine", "EngineResult", "LogDiff", "MigrationSpec", "OracleResult",
    "RunOutcome", "RunReport", "Scenario", "diff_logs", "load_scenario", "oracle_run",
    "parse_scenario", "run_scenario", "sweep",
]
