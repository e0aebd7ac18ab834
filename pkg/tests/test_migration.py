import pytest

from elastream.event_core import CLOSE_TS, Event, TimestampVector
from elastream.harness.engine import Engine
from elastream.harness.oracle import oracle_run
from elastream.harness.scenario import MigrationSpec, parse_scenario
from elastream.migration import (
    AlreadyMigrating,
    Divergence,
    MigrationCoordinator,
    MigrationPhase,
    MigrationPlan,
    PhaseError,
    ReplicaPair,
    TargetUnavailable,
    check_sync,
    finalize,
    start_migration,
)
from elastream.operator_runtime import OperatorLogic, PartitionState, process, register_logic, snapshot, state_hash
from elastream.workloads import GeneratedEvent, PlugReading, plug_key

PIPELINE = """
name: small
seed: {seed}
steps: {steps}
nodes: [1, 2, 3, 4, 9]
down_nodes: [9]
workload:
  plugs: 6
  sources: [{{id: 1, node: 1}}, {{id: 2, node: 1}}]
operators:
  - {{id: 1, name: avg, logic: {logic}, params: {{window: "3"}}, inputs: [sources], placement: [2]}}
sink: {{node: 4, inputs: [avg]}}
links:
  default: {{delay: "uniform(1,3)"}}
{migrations}
"""


def small(seed=3, steps=400, logic="forecast", at=None):
    migrations = "" if at is None else f"migrations: [{{at: {at}, op: avg, target: 3}}]"
    return parse_scenario(PIPELINE.format(seed=seed, steps=steps, logic=logic, migrations=migrations))


def out(ts, payload=b"x"):
    return Event(99, ts, b"k", payload)


def pair_with(a, b):
    pair = ReplicaPair(object(), object())
    pair.output_log_a.extend(a)
    pair.output_log_b.extend(b)
    return pair


def test_check_sync_window_met():
    logs = [out(100), out(101), out(102)]
    assert check_sync(pair_with(logs, list(logs)), 3)


def test_check_sync_candidate_behind():
    pair = pair_with([out(100), out(101), out(102)], [out(100), out(101)])
    assert not check_sync(pair, 3)
    assert [e.ts for e in pair.output_log_a] == [102]


def test_check_sync_payload_divergence():
    with pytest.raises(Divergence):
        check_sync(pair_with([out(100, b"a")], [out(100, b"b")]), 1)


def test_check_sync_missing_output_is_divergence():
    with pytest.raises(Divergence, match="candidate"):
        check_sync(pair_with([out(101)], [out(100), out(101)]), 1)


def test_check_sync_at_end_of_input_needs_everything_matched():
    pair = pair_with([out(1)], [out(1)])
    pair.original_done = pair.candidate_done = True
    assert check_sync(pair, 16)


def test_plan_invariants():
    with pytest.raises(ValueError):
        MigrationPlan(1, 0, 2, 2)
    with pytest.raises(ValueError):
        MigrationPlan(1, 0, 2, 3, sync_window=0)


def test_start_errors():
    engine = Engine(small())
    co = engine.coordinator
    with pytest.raises(TargetUnavailable):
        start_migration(co, MigrationPlan(1, 0, 2, 9))
    with pytest.raises(TargetUnavailable):
        start_migration(co, MigrationPlan(1, 0, 0, 2))  # already lives there
    plan = MigrationPlan(1, 0, 2, 3)
    assert start_migration(co, plan)
    assert plan.phase is MigrationPhase.DUPLICATING
    assert len(engine.routes[(1, 0)]) == 2
    with pytest.raises(AlreadyMigrating):
        start_migration(co, MigrationPlan(1, 0, 2, 3))
    with pytest.raises(PhaseError):
        finalize(co, plan)


def ten_readings():
    events = [GeneratedEvent(ts, Event(1, ts, plug_key(0), PlugReading(0, 100 * ts, ts).encode()))
              for ts in range(1, 11)]
    events += [GeneratedEvent(11, Event.watermark(1, CLOSE_TS)), GeneratedEvent(11, Event.watermark(2, CLOSE_TS))]
    return events


def test_both_replicas_ingest_events_after_start():
    sc = small(at=0)
    engine = Engine(sc)
    result = engine.run(ten_readings())
    original, candidate = engine.all_replicas
    assert candidate.is_candidate is False and original.retired
    assert original.ingested == candidate.ingested == 10
    # the snapshot of an untouched state carries an empty vector and drops nothing
    assert result.records[2].note == "restored tv=TimestampVector({})"
    assert candidate.dropped_duplicates == 0
    assert result.sink_log == oracle_run(sc, ten_readings()).sink_log


def test_transfer_drops_events_covered_by_snapshot():
    sc = small(logic="window_average")
    engine = Engine(sc)
    original = engine.replica(1, 0)
    candidate = engine.spawn_candidate(1, 0, 3)
    events = [Event(1, ts, plug_key(0), PlugReading(0, 7 * ts, ts).encode()) for ts in range(1, 61)]
    for e in events[:50]:
        process(original.state, e, original.logic)
    assert original.state.tv == TimestampVector.of({1: 50})
    source_channel = engine.sources[1].ep_id
    for e in events[40:]:
        candidate.receive(source_channel, e)
    candidate.receive(source_channel, Event.watermark(1, 60))
    candidate.receive(engine.sources[2].ep_id, Event.watermark(2, 60))
    candidate.install_snapshot(snapshot(original.state).encode())
    candidate.pump()
    assert candidate.dropped_duplicates == 10
    assert candidate.processed == 10
    straight = PartitionState.fresh(1, 0, original.logic)
    for e in events:
        process(straight, e, original.logic)
    assert state_hash(candidate.state) == state_hash(straight)


def test_end_to_end_migration_at_400_matches_oracle():
    sc = small(steps=1000, at=400)
    result = Engine(sc).run(sc.generate())
    assert result.completed_migrations == 1
    assert result.sink_log == oracle_run(sc).sink_log
    phases = [(r.phase_from, r.phase_to) for r in result.records]
    assert phases == [("single", "duplicating"), ("duplicating", "snapshotting"),
                      ("snapshotting", "syncing"), ("syncing", "switched")]
    assert result.output_duplicates > 0
    switched = result.records[-1]
    assert switched.compared_outputs >= sc.sync_window or "hash" in switched.note


def test_downstream_drops_exactly_the_overlap():
    sc = small(steps=600, at=200)
    engine = Engine(sc)
    emitted: dict[int, set[int]] = {}
    real_emit = engine.emit_from_replica

    def spy(replica, events):
        emitted.setdefault(replica.ep_id, set()).update(e.ts for e in events if e.is_data)
        real_emit(replica, events)

    engine.emit_from_replica = spy
    result = engine.run(sc.generate())
    original, candidate = (r.ep_id for r in engine.all_replicas)
    overlap = emitted[original] & emitted[candidate]
    assert overlap and result.output_duplicates == len(overlap)
    assert len(engine.routes[(1, 0)]) == 1


def test_finalize_is_idempotent():
    sc = small(steps=300, at=100)
    engine = Engine(sc)
    plans = []
    real_start = engine.coordinator.start_migration
    engine.coordinator.start_migration = lambda plan: plans.append(plan) or real_start(plan)
    engine.run(sc.generate())
    (plan,) = plans
    assert plan.phase is MigrationPhase.SWITCHED
    records = len(engine.coordinator.records)
    assert finalize(engine.coordinator, plan)
    assert len(engine.coordinator.records) == records


def test_liveness_bound():
    sc = small(steps=1000, at=400)
    result = Engine(sc).run(sc.generate())
    started, switched = result.records[0].step, result.records[-1].step
    # snapshot lag plus a window of outputs (windows of 3 readings over 6 plugs)
    assert switched - started <= 10 + sc.sync_window * 3 * 6 // 2


def test_corrupted_transfer_rolls_back():
    sc = small(steps=500, at=200)
    baseline = Engine(sc, migrations=[]).run(sc.generate())
    result = Engine(sc, corrupt_transfer=True).run(sc.generate())
    assert result.completed_migrations == 0
    assert result.aborted_migrations and "SnapshotFailure" in result.aborted_migrations[0]
    assert result.records[-1].phase_to == "single"
    assert result.sink_log == oracle_run(sc).sink_log
    assert result.final_state_hashes == baseline.final_state_hashes


@pytest.mark.parametrize("phase", [MigrationPhase.DUPLICATING, MigrationPhase.SYNCING])
def test_abort_in_any_phase_leaves_original_as_without_migration(phase):
    sc = small(steps=500, at=200)
    baseline = Engine(sc, migrations=[]).run(sc.generate())
    engine = Engine(sc)
    co = engine.coordinator
    real_tick = co.tick

    def tick():
        pair = co.pair(1, 0)
        if pair is not None and co.phase_of(1, 0) is phase:
            plan = co._active[(1, 0)].plan
            co.abort(plan, "operator request")
            return
        real_tick()

    co.tick = tick
    result = engine.run(sc.generate())
    assert result.aborted_migrations == ["operator request"]
    assert result.final_state_hashes == baseline.final_state_hashes
    assert result.sink_log == baseline.sink_log


def test_illegal_transition_rejected():
    co = MigrationCoordinator(engine=None)
    plan = MigrationPlan(1, 0, 1, 2)
    with pytest.raises(PhaseError):
        co.transfer_snapshot(plan)


@register_logic
class _Relay(OperatorLogic):
    """Order-sensitive downstream stage: tags each input with a running per-key count."""

    logic_id = "test_relay"

    def apply(self, state, event):
        seen = int(state.get(event.key) or b"0") + 1
        state.put(event.key, str(seen).encode())
        return [(event.key, event.payload + seen.to_bytes(4, "big"))]


def test_migrating_an_upstream_operator():
    text = """
name: chain
seed: 4
steps: 600
nodes: [1, 2, 3, 4, 5]
workload:
  plugs: 6
  sources: [{id: 1, node: 1}]
operators:
  - {id: 1, name: avg, logic: window_average, params: {window: "2"}, parallelism: 2, inputs: [sources], placement: [2, 3]}
  - {id: 2, name: fc, logic: test_relay, inputs: [avg], placement: [4]}
sink: {node: 5, inputs: [fc]}
links: {default: {delay: "uniform(1,4)"}}
migrations:
  - {at: 150, op: avg, partition: 1, target: 4}
  - {at: 300, op: fc, partition: 0, target: 2}
"""
    sc = parse_scenario(text)
    result = Engine(sc).run(sc.generate())
    assert result.completed_migrations == 2
    oracle = oracle_run(sc).sink_log
    assert oracle and result.sink_log == oracle
