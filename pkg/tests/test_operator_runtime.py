import hashlib
import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from elastream.event_core import Event, TimestampVector
from elastream.operator_runtime import (
    FanoutOverflow,
    HashMismatch,
    LogicFailure,
    OperatorDescriptor,
    OperatorLogic,
    PartitionState,
    StateSnapshot,
    UnknownLogic,
    VersionMismatch,
    output_stream_id,
    output_timestamp,
    output_watermark,
    partition_for,
    process,
    register_logic,
    restore,
    snapshot,
    state_hash,
    states_equal,
)
from elastream.workloads import PlugReading


def reading(ts, load, plug=0, source=1):
    return Event(source, ts, f"plug-{plug}".encode(), PlugReading(plug, load, ts - 1).encode())


def fresh(logic_id, params=None, op_id=1, part=0):
    logic = OperatorDescriptor(op_id, logic_id, logic_id, params=params or {}).make_logic()
    return PartitionState.fresh(op_id, part, logic), logic


def test_counter_fold_step():
    state, logic = fresh("counter")
    assert process(state, reading(1, 100), logic) == []
    assert state.store.get(b"count") == struct.pack(">Q", 1)
    assert state.tv == TimestampVector.of({1: 1})


def test_window_average_emits_mean():
    state, logic = fresh("window_average", {"window": "4"})
    outputs = []
    for ts, load in zip(range(1, 5), (200, 400, 600, 800)):
        outputs.extend(process(state, reading(ts, load), logic))
    assert len(outputs) == 1
    # mean of 2, 4, 6, 8 watts computed independently
    assert struct.unpack(">Q", outputs[0].payload)[0] == sum((2, 4, 6, 8)) * 100 // 4 == 500
    assert outputs[0].ts == output_timestamp(4, 0)
    assert outputs[0].source == output_stream_id(1, 0)


def test_output_timestamp_examples():
    assert output_timestamp(3, 0, 16) == 196608
    assert output_timestamp(3, 2, 16) == 196610
    assert output_timestamp(3, 65534, 16) == 3 * 65536 + 65534
    with pytest.raises(FanoutOverflow):
        output_timestamp(3, 65535, 16)  # the 65536th emission


def test_output_watermark_covers_all_emissions_of_released_inputs():
    assert output_watermark(0) == 0
    assert output_watermark(3, 16) == (4 << 16) - 1
    assert output_watermark(2**62, 16) == 2**64 - 1


@register_logic
class _Burst(OperatorLogic):
    logic_id = "test_burst"

    def apply(self, state, event):
        return [(b"k", b"")] * int(self.params.get("n", "1"))


@register_logic
class _Broken(OperatorLogic):
    logic_id = "test_broken"

    def apply(self, state, event):
        state.put(b"half-written", b"x")
        raise ZeroDivisionError("boom")


def test_fanout_overflow_per_input():
    state, logic = fresh("test_burst", {"n": "3"})
    assert len(process(state, Event(1, 1), logic, fanout_bits=2)) == 3
    state, logic = fresh("test_burst", {"n": "4"})
    with pytest.raises(FanoutOverflow):
        process(state, Event(1, 1), logic, fanout_bits=2)


def test_emission_index_continues_across_sources_with_equal_ts():
    state, logic = fresh("test_burst", {"n": "2"})
    first = process(state, Event(1, 5), logic)
    second = process(state, Event(2, 5), logic)
    assert [e.ts for e in first + second] == [output_timestamp(5, i) for i in range(4)]
    third = process(state, Event(1, 6), logic)
    assert [e.ts for e in third] == [output_timestamp(6, 0), output_timestamp(6, 1)]
    assert state.out_seq == 6


def test_logic_failure_leaves_state_unchanged():
    state, logic = fresh("test_broken")
    before = snapshot(state).encode()
    with pytest.raises(LogicFailure):
        process(state, Event(1, 1), logic)
    assert snapshot(state).encode() == before


def test_unknown_logic_and_bad_parallelism():
    with pytest.raises(UnknownLogic):
        OperatorDescriptor(1, "x", "no-such-logic")
    with pytest.raises(ValueError):
        OperatorDescriptor(1, "x", "counter", parallelism=0)


def test_partition_is_stable_hash():
    key = b"plug-3"
    expected = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big") % 5
    assert partition_for(key, 5) == expected
    assert partition_for(key, 1) == 0


def test_snapshot_roundtrip_on_fresh_state():
    state, logic = fresh("forecast")
    back = restore(StateSnapshot.decode(snapshot(state).encode()), logic)
    assert states_equal(state, back)
    assert back.tv == TimestampVector()


def test_snapshot_layout():
    state, logic = fresh("counter", op_id=7, part=3)
    process(state, Event(2, 9), logic)
    raw = snapshot(state).encode()
    magic, version, op_id, part, out_seq = struct.unpack_from(">4sBQIQ", raw, 0)
    assert (magic, version, op_id, part, out_seq) == (b"SM3G", 1, 7, 3, 0)
    assert struct.unpack_from(">IQQ", raw, 25) == (1, 2, 9)
    assert raw[-32:] == hashlib.sha256(raw[:-32]).digest()


def test_tampered_snapshot_fails_hash():
    state, logic = fresh("counter")
    process(state, Event(1, 1), logic)
    raw = bytearray(snapshot(state).encode())
    raw[-40] ^= 0x10
    with pytest.raises(HashMismatch):
        StateSnapshot.decode(bytes(raw))


def test_restore_under_other_logic_is_version_mismatch():
    state, _ = fresh("counter")
    _, other = fresh("running_sum")
    with pytest.raises(VersionMismatch):
        restore(snapshot(state), other)


def test_restored_replica_drops_old_events():
    state, logic = fresh("counter")
    for ts in range(1, 11):
        process(state, Event(1, ts), logic)
    back = restore(snapshot(state), logic)
    assert back.tv.is_duplicate(Event(1, 10))
    assert not back.tv.is_duplicate(Event(1, 11))
    empty = restore(snapshot(fresh("counter")[0]), logic)
    assert not empty.tv.is_duplicate(Event(1, 1))


def forecast_stream(n, seed=3):
    rng = random.Random(seed)
    return [reading(ts, rng.randint(0, 50_000), plug=ts % 7, source=1 + ts % 2) for ts in range(1, n + 1)]


def test_snapshot_after_100_then_replay_matches_uninterrupted_run():
    events = forecast_stream(200)
    straight, logic = fresh("forecast", {"window": "3"})
    straight_out = [o for e in events for o in process(straight, e, logic)]

    first, logic = fresh("forecast", {"window": "3"})
    out = [o for e in events[:100] for o in process(first, e, logic)]
    resumed = restore(StateSnapshot.decode(snapshot(first).encode()), logic)
    out += [o for e in events[100:] for o in process(resumed, e, logic)]
    assert out == straight_out
    assert state_hash(resumed) == state_hash(straight)


@given(st.lists(st.tuples(st.integers(1, 3), st.integers(0, 10_000)), max_size=60))
def test_exactly_once_accounting(stream):
    """process calls + duplicate drops = deliveries, and tv is the per-source max processed."""
    state, logic = fresh("running_sum")
    processed = dropped = 0
    seen = {}
    for i, (source, load) in enumerate(stream):
        ts = (i // 2) + 1  # every timestamp is delivered twice per source pair
        event = Event(source, ts, b"plug-0", PlugReading(0, load, 0).encode())
        if state.tv.is_duplicate(event):
            dropped += 1
            continue
        process(state, event, logic)
        processed += 1
        seen[source] = max(seen.get(source, 0), ts)
    assert processed + dropped == len(stream)
    assert state.tv == TimestampVector.of(seen)
