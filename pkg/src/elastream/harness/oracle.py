"""Reference execution: one process, no network, no merge buffer, no migration.

Events are sorted once by ``(ts, source, per-source position)`` and folded
through each operator in topological order.  The only code shared with the
engine is the operator logic itself, so agreement between the two is a real
check on the distributed path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..event_core import Event
from ..operator_runtime import OUTPUT_STREAM_BASE
from .scenario import Scenario


@dataclass
class OracleResult:
    sink_log: list[Event]
    # (op_id, partition) -> final key/value state
    states: dict[tuple[int, int], dict[bytes, bytes]] = field(default_factory=dict)
    processed: int = 0


class _Store(dict):
    def put(self, key: bytes, value: bytes) -> None:
        self[key] = value


def _partition(key: bytes, parallelism: int) -> int:
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") % parallelism


def _total_order(streams: dict[int, list[Event]]) -> list[Event]:
    keyed = [
        (event.ts, source, position, event)
        for source, events in streams.items()
        for position, event in enumerate(events)
    ]
    keyed.sort(key=lambda entry: entry[:3])
    return [entry[3] for entry in keyed]


def oracle_run(scenario: Scenario, generated: list | None = None) -> OracleResult:
    generated = scenario.generate() if generated is None else generated
    bits = scenario.fanout_bits
    # every stream id -> its data events in emission order
    streams: dict[int, list[Event]] = {}
    for g in generated:
        if g.event.is_data:
            streams.setdefault(g.event.source, []).append(g.event)

    result = OracleResult(sink_log=[])
    for op in scenario.topological_operators():
        inputs = scenario.input_streams(op)
        ordered = _total_order({s: streams.get(s, []) for s in inputs})
        logic = op.make_logic()
        stores = [_Store() for _ in range(op.parallelism)]
        last_ts = [0] * op.parallelism
        index = [0] * op.parallelism
        outputs: dict[int, list[Event]] = {}
        for event in ordered:
            part = _partition(event.key, op.parallelism)
            emitted = logic.apply(stores[part], event)
            result.processed += 1
            if event.ts != last_ts[part]:
                last_ts[part], index[part] = event.ts, 0
            stream = OUTPUT_STREAM_BASE | (op.op_id << 20) | part
            for key, payload in emitted:
                ts = (event.ts << bits) + index[part]
                index[part] += 1
                outputs.setdefault(stream, []).append(Event(stream, ts, key, payload))
        streams.update(outputs)
        for part, store in enumerate(stores):
            result.states[(op.op_id, part)] = dict(store)

    result.sink_log = _total_order({s: streams.get(s, []) for s in scenario.sink_streams()})
    return result
