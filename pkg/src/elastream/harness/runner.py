"""Drives scenarios end to end and turns engine results into reports."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, TextIO

from ..event_core import Event
from ..operator_runtime import OUTPUT_STREAM_BASE
from .engine import Engine, EngineResult
from .oracle import OracleResult, oracle_run
from .report import RunReport, diff_logs, latency_histogram
from .scenario import ConfigError, MigrationSpec, Scenario


@dataclass
class RunOutcome:
    report: RunReport
    result: EngineResult
    oracle: OracleResult


def _latencies(scenario: Scenario, log: list[Event], release_steps: list[int]) -> list[int]:
    """Sink release step minus the step at which the originating reading was emitted."""
    bits = scenario.fanout_bits
    out = []
    for event, released in zip(log, release_steps):
        depth = 0
        if event.source >= OUTPUT_STREAM_BASE:
            depth = scenario.depth((event.source >> 20) & 0xFFFFF)
        input_ts = event.ts >> (bits * depth)
        out.append(released - (input_ts - 1))
    return out


def held_events(baseline: EngineResult, run: EngineResult) -> tuple[int, int]:
    """Count inputs the startup replicas processed later than in a run without migration.

    Returns ``(held, compared)``.  Each link draws timing from its own random
    stream, so a migration leaves the original replica's inputs on exactly
    the baseline schedule unless the migration itself makes them wait.
    """
    held = compared = 0
    for key, steps in run.processed_at.items():
        reference = baseline.processed_at.get(key, {})
        for event_id, step in steps.items():
            if event_id in reference:
                compared += 1
                if step > reference[event_id]:
                    held += 1
    return held, compared


def run_scenario(scenario: Scenario, *, seed: int | None = None, enclave: bool | None = None,
                 trace: TextIO | None = None, oracle: OracleResult | None = None,
                 baseline: EngineResult | None = None, generated: list | None = None,
                 corrupt_transfer: bool = False) -> RunOutcome:
    if seed is not None:
        scenario = scenario.with_changes(seed=seed)
    enclave_on = scenario.enclave.enabled if enclave is None else enclave
    generated = scenario.generate() if generated is None else generated
    oracle = oracle_run(scenario, generated) if oracle is None else oracle
    if scenario.migrations and baseline is None:
        baseline = Engine(scenario, enclave=enclave_on, migrations=[]).run(generated)

    result = Engine(scenario, enclave=enclave_on, trace=trace,
                    corrupt_transfer=corrupt_transfer).run(generated)

    diff = diff_logs(result.sink_log, oracle.sink_log)
    probes: dict[str, bool] = {}
    notes: dict[str, str] = {}
    probes["no_divergence"] = not result.divergences
    probes["no_logic_failure"] = not result.logic_failures
    if scenario.migrations:
        probes["migrations_completed"] = result.completed_migrations == len(scenario.migrations)
        notes["migrations_completed"] = f"{result.completed_migrations}/{len(scenario.migrations)}"
        held, compared = held_events(baseline, result)
        probes["no_event_held_by_migration"] = held == 0
        notes["no_event_held_by_migration"] = f"{held} of {compared} inputs delayed"
    if enclave_on:
        ok = (result.resident_probe_violations == 0
              and result.max_resident_bytes <= scenario.enclave.budget_bytes)
        probes["resident_within_budget"] = ok
        notes["resident_within_budget"] = (
            f"max {result.max_resident_bytes} of {scenario.enclave.budget_bytes}"
        )

    report = RunReport(
        scenario=scenario.name,
        seed=scenario.seed,
        enclave=enclave_on,
        steps=result.steps,
        events_generated=result.generated,
        events_delivered=result.delivered,
        input_duplicates_dropped=result.input_duplicates,
        output_duplicates_dropped=result.output_duplicates,
        replays_dropped=result.replays_dropped,
        sink_events=len(result.sink_log),
        oracle_events=len(oracle.sink_log),
        output_diff=diff.describe(),
        migrations=[record.line() for record in result.records],
        migrations_requested=len(scenario.migrations),
        migrations_completed=result.completed_migrations,
        aborted=list(result.aborted_migrations),
        divergences=list(result.divergences),
        logic_failures=list(result.logic_failures),
        max_resident_bytes=result.max_resident_bytes,
        budget_bytes=scenario.enclave.budget_bytes if enclave_on else 0,
        evictions=result.evictions,
        latency=latency_histogram(_latencies(scenario, result.sink_log, result.sink_release_steps)),
        probes=probes,
        probe_notes=notes,
    ).decide()
    return RunOutcome(report, result, oracle)


def parse_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        a, b = int(lo), int(hi if sep else lo)
    except ValueError:
        raise ConfigError(f"expected a range like 1..1000, got {text!r}", "--migrate-at") from None
    if a > b:
        raise ConfigError(f"empty range {text!r}", "--migrate-at")
    return a, b


def sweep_points(lo: int, hi: int, step: int = 1) -> list[int]:
    if step < 1:
        raise ConfigError("step must be positive", "--step")
    return list(range(lo, hi + 1, step))


def sweep(scenario: Scenario, points: Iterable[int], *, enclave: bool | None = None,
          migration: MigrationSpec | None = None) -> list[tuple[int, RunOutcome]]:
    """Run the scenario once per trigger point, migrating the same partition each time.

    The oracle and the migration-free baseline are computed once and shared.
    """
    template = migration or (scenario.migrations[0] if scenario.migrations else None)
    if template is None:
        raise ConfigError("sweep needs a migration in the scenario to move", "migrations")
    enclave_on = scenario.enclave.enabled if enclave is None else enclave
    generated = scenario.generate()
    oracle = oracle_run(scenario, generated)
    baseline = Engine(scenario, enclave=enclave_on, migrations=[]).run(generated)
    outcomes = []
    for at in points:
        if not 0 <= at <= scenario.steps:
            raise ConfigError(f"trigger {at} outside the run (0..{scenario.steps})", "--migrate-at")
        variant = scenario.with_changes(migrations=[replace(template, at=at)])
        outcome = run_scenario(variant, enclave=enclave_on, oracle=oracle, baseline=baseline,
                               generated=generated)
        outcomes.append((at, outcome))
    return outcomes
