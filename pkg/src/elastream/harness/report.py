"""Run reports: a deterministic JSON body plus a human-readable rendering.

The only non-deterministic part of a written report is its first line, a
``# generated ...`` timestamp header, so two reports for the same scenario and
seed compare equal once that line is dropped.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any

from ..event_core import Event, decode_log, encode_log


@dataclass(frozen=True)
class LogDiff:
    equal: bool
    index: int | None = None  # first differing event
    offset: int | None = None  # first differing byte of the encoded logs
    detail: str = ""

    def describe(self) -> str:
        if self.equal:
            return "equal"
        return f"differ at event {self.index} (byte {self.offset}): {self.detail}"


def diff_logs(a: bytes | list[Event], b: bytes | list[Event]) -> LogDiff:
    """Byte comparison of two encoded output logs, reporting the first divergence."""
    raw_a = encode_log(a) if isinstance(a, list) else a
    raw_b = encode_log(b) if isinstance(b, list) else b
    if raw_a == raw_b:
        return LogDiff(True)
    offset = next((i for i, (x, y) in enumerate(zip(raw_a, raw_b)) if x != y), min(len(raw_a), len(raw_b)))
    events_a = decode_log(raw_a) if isinstance(a, bytes) else a
    events_b = decode_log(raw_b) if isinstance(b, bytes) else b
    for i, (x, y) in enumerate(zip(events_a, events_b)):
        if x != y:
            return LogDiff(False, i, offset, f"{_brief(x)} != {_brief(y)}")
    i = min(len(events_a), len(events_b))
    longer, which = (events_a, "first") if len(events_a) > len(events_b) else (events_b, "second")
    return LogDiff(False, i, offset,
                   f"{which} log has {len(longer) - i} extra events starting with {_brief(longer[i])}")


def _brief(event: Event) -> str:
    return f"source={event.source} ts={event.ts} key={event.key!r}"


def latency_histogram(latencies: list[int]) -> dict[str, Any]:
    """Bucket latencies (in logical steps) by powers of two, plus summary figures."""
    if not latencies:
        return {"count": 0, "buckets": {}}
    buckets: dict[str, int] = {}
    for value in latencies:
        lo = 0 if value <= 0 else 1 << (value.bit_length() - 1)
        hi = 0 if lo == 0 else 2 * lo - 1
        label = f"{lo}-{hi}" if hi > lo else str(lo)
        buckets[label] = buckets.get(label, 0) + 1
    ordered = sorted(latencies)

    def pct(q: float) -> int:
        return ordered[min(len(ordered) - 1, int(q * len(ordered)))]

    order = sorted(buckets, key=lambda label: int(label.split("-")[0]))
    return {
        "count": len(ordered),
        "min": ordered[0],
        "p50": pct(0.5),
        "p99": pct(0.99),
        "max": ordered[-1],
        "mean": round(sum(ordered) / len(ordered), 3),
        "buckets": {label: buckets[label] for label in order},
    }


@dataclass
class RunReport:
    scenario: str
    seed: int
    enclave: bool
    steps: int
    events_generated: int
    events_delivered: int
    input_duplicates_dropped: int
    output_duplicates_dropped: int
    replays_dropped: int
    sink_events: int
    oracle_events: int
    output_diff: str
    migrations: list[str] = field(default_factory=list)
    migrations_requested: int = 0
    migrations_completed: int = 0
    aborted: list[str] = field(default_factory=list)
    divergences: list[str] = field(default_factory=list)
    logic_failures: list[str] = field(default_factory=list)
    max_resident_bytes: int = 0
    budget_bytes: int = 0
    evictions: int = 0
    latency: dict[str, Any] = field(default_factory=dict)
    probes: dict[str, bool] = field(default_factory=dict)
    probe_notes: dict[str, str] = field(default_factory=dict)
    verdict: str = "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def decide(self) -> RunReport:
        ok = self.output_diff == "equal" and all(self.probes.values())
        self.verdict = "pass" if ok else "fail"
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"scenario {self.scenario} (seed {self.seed}, enclave {'on' if self.enclave else 'off'})",
            f"  steps {self.steps}, generated {self.events_generated}, delivered {self.events_delivered}",
            f"  duplicates dropped: inputs {self.input_duplicates_dropped}, "
            f"outputs {self.output_duplicates_dropped}, replays {self.replays_dropped}",
            f"  sink {self.sink_events} events, oracle {self.oracle_events}: {self.output_diff}",
        ]
        if self.enclave:
            lines.append(f"  enclave resident max {self.max_resident_bytes} / {self.budget_bytes} bytes, "
                         f"{self.evictions} evictions")
        if self.migrations_requested:
            lines.append(f"  migrations {self.migrations_completed}/{self.migrations_requested} completed")
            lines.extend(f"    {line}" for line in self.migrations)
        for label, items in (("aborted", self.aborted), ("divergence", self.divergences),
                             ("logic failure", self.logic_failures)):
            lines.extend(f"  {label}: {item}" for item in items)
        if self.latency.get("count"):
            lat = self.latency
            lines.append(f"  latency steps: min {lat['min']} p50 {lat['p50']} p99 {lat['p99']} max {lat['max']}")
        for name, held in sorted(self.probes.items()):
            note = self.probe_notes.get(name)
            lines.append(f"  probe {name}: {'ok' if held else 'FAILED'}" + (f" ({note})" if note else ""))
        lines.append(f"verdict: {self.verdict}")
        return "\n".join(lines)


def header_line(now: datetime | None = None) -> str:
    now = now or datetime.now(timezone.utc)
    return f"# generated {now.isoformat(timespec='seconds')}"


def render(report: RunReport, fmt: str = "json") -> str:
    body = report.to_json() if fmt == "json" else report.to_text()
    return f"{header_line()}\n{body}\n"


def strip_header(text: str) -> str:
    first, _, rest = text.partition("\n")
    return rest if first.startswith("# generated") else text
