"""Live migration of one operator partition between nodes.

The coordinator walks a partition through
``SINGLE -> DUPLICATING -> SNAPSHOTTING -> SYNCING -> SWITCHED``:

* DUPLICATING: a candidate replica with empty state is spawned on the target
  node and every input of the partition is now routed to both replicas.  The
  candidate only buffers.
* SNAPSHOTTING: once the original has applied every input that was routed to
  it alone, its state is snapshotted and shipped to the candidate.
* SYNCING: the candidate restores the snapshot, discards buffered inputs the
  snapshot already covers and starts processing.  Outputs of both replicas
  are compared by output timestamp.
* SWITCHED: after ``sync_window`` identical outputs the original is torn
  down.  Consumers saw both replicas under one stream id and drop the
  overlap themselves.

Any failure before SWITCHED removes the candidate and leaves the original
serving as if nothing had happened.

The coordinator drives a host engine through a handful of calls
(``node_alive``, ``replica``, ``spawn_candidate``, ``routed_vector``,
``start_duplication``, ``send_snapshot``, ``retire``); see
:class:`elastream.harness.engine.Engine`.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque

from .event_core import Event, TimestampVector
from .operator_runtime import StateSnapshot, snapshot, state_hash

log = logging.getLogger(__name__)

DEFAULT_SYNC_WINDOW = 16


class MigrationError(Exception):
    pass


class TargetUnavailable(MigrationError):
    pass


class AlreadyMigrating(MigrationError):
    pass


class SnapshotFailure(MigrationError):
    pass


class Divergence(MigrationError):
    """Replicas produced different outputs from the same input: determinism is broken."""


class PhaseError(MigrationError):
    pass


class MigrationPhase(enum.Enum):
    SINGLE = "single"
    DUPLICATING = "duplicating"
    SNAPSHOTTING = "snapshotting"
    SYNCING = "syncing"
    SWITCHED = "switched"


_NEXT = {
    MigrationPhase.SINGLE: MigrationPhase.DUPLICATING,
    MigrationPhase.DUPLICATING: MigrationPhase.SNAPSHOTTING,
    MigrationPhase.SNAPSHOTTING: MigrationPhase.SYNCING,
    MigrationPhase.SYNCING: MigrationPhase.SWITCHED,
}


@dataclass
class MigrationPlan:
    op_id: int
    partition_index: int
    source_node: int
    target_node: int
    sync_window: int = DEFAULT_SYNC_WINDOW
    started_at: int = 0
    phase: MigrationPhase = MigrationPhase.SINGLE

    def __post_init__(self) -> None:
        if self.source_node == self.target_node:
            raise ValueError("migration target must differ from the source node")
        if self.sync_window < 1:
            raise ValueError("sync_window must be >= 1")

    @property
    def key(self) -> tuple[int, int]:
        return (self.op_id, self.partition_index)


@dataclass
class ReplicaPair:
    original: Any
    candidate: Any
    output_log_a: Deque[Event] = field(default_factory=deque)
    output_log_b: Deque[Event] = field(default_factory=deque)
    matched: int = 0
    last_matched_ts: int = 0
    original_done: bool = False
    candidate_done: bool = False

    def record(self, replica: Any, events: list[Event]) -> None:
        data = [e for e in events if e.is_data]
        if replica is self.original:
            self.output_log_a.extend(data)
        elif replica is self.candidate:
            self.output_log_b.extend(data)


def check_sync(pair: ReplicaPair, window: int) -> bool:
    """Compare the replicas' outputs in lockstep by output timestamp.

    True once ``window`` outputs have matched byte for byte, or, when both
    replicas have consumed their whole input, once every output has matched.  Raises Divergence on a mismatch.
    """
    a, b = pair.output_log_a, pair.output_log_b
    while a and b:
        x, y = a[0], b[0]
        if x.ts != y.ts:
            older = x if x.ts < y.ts else y
            side = "original" if older is x else "candidate"
            raise Divergence(
                f"{side} emitted ts {older.ts} that the other replica skipped"
            )
        if x.encode() != y.encode():
            raise Divergence(f"replicas disagree at output ts {x.ts}")
        a.popleft()
        b.popleft()
        pair.matched += 1
        pair.last_matched_ts = x.ts
    if pair.original_done and pair.candidate_done:
        if a or b:
            leftover = (a or b)[0]
            raise Divergence(f"output ts {leftover.ts} produced by only one replica")
        return True
    # whatever is left over is newer than the last match and may still pair up
    return pair.matched >= window


@dataclass
class MigrationRecord:
    step: int
    op_id: int
    partition: int
    phase_from: str
    phase_to: str
    duplicated_inputs: int
    dropped_duplicates: int
    compared_outputs: int
    note: str = ""

    def line(self) -> str:
        text = (
            f"step={self.step} op={self.op_id} partition={self.partition} "
            f"phase={self.phase_from}->{self.phase_to} duplicated_inputs={self.duplicated_inputs} "
            f"dropped_duplicates={self.dropped_duplicates} compared_outputs={self.compared_outputs}"
        )
        return f"{text} note={self.note}" if self.note else text


@dataclass
class _Active:
    plan: MigrationPlan
    pair: ReplicaPair
    cutover: TimestampVector
    snapshot_sent: bool = False
    synced_at: int | None = None
    hash_checked: bool = False


class MigrationCoordinator:
    def __init__(self, engine: Any, finalize_grace: int = 50,
                 on_record: Callable[[MigrationRecord], None] | None = None):
        self.engine = engine
        self.finalize_grace = finalize_grace
        self.records: list[MigrationRecord] = []
        self.divergences: list[str] = []
        self.completed: list[MigrationPlan] = []
        self.aborted: list[tuple[MigrationPlan, str]] = []
        self._active: dict[tuple[int, int], _Active] = {}
        self._on_record = on_record

    @property
    def busy(self) -> bool:
        return bool(self._active)

    def phase_of(self, op_id: int, partition: int) -> MigrationPhase:
        active = self._active.get((op_id, partition))
        return active.plan.phase if active else MigrationPhase.SINGLE

    def pair(self, op_id: int, partition: int) -> ReplicaPair | None:
        active = self._active.get((op_id, partition))
        return active.pair if active else None

    def _move(self, active: _Active, to: MigrationPhase, note: str = "") -> None:
        plan = active.plan
        if to is not MigrationPhase.SINGLE and _NEXT.get(plan.phase) is not to:
            raise PhaseError(f"illegal transition {plan.phase.value} -> {to.value}")
        cand = active.pair.candidate
        record = MigrationRecord(
            self.engine.step, plan.op_id, plan.partition_index, plan.phase.value, to.value,
            cand.ingested if cand is not None else 0,
            cand.dropped_duplicates if cand is not None else 0,
            active.pair.matched, note,
        )
        plan.phase = to
        self.records.append(record)
        log.info("migration %s", record.line())
        if self._on_record is not None:
            self._on_record(record)

    def start_migration(self, plan: MigrationPlan) -> bool:
        if plan.key in self._active or plan.phase is not MigrationPhase.SINGLE:
            raise AlreadyMigrating(f"operator {plan.op_id} partition {plan.partition_index} is already migrating")
        if not self.engine.node_alive(plan.target_node):
            raise TargetUnavailable(f"node {plan.target_node} is not available")
        original = self.engine.replica(plan.op_id, plan.partition_index)
        if original.node == plan.target_node:
            raise TargetUnavailable(f"partition already lives on node {plan.target_node}")
        plan.source_node = original.node
        plan.started_at = self.engine.step
        cutover = self.engine.routed_vector(plan.op_id, plan.partition_index)
        candidate = self.engine.spawn_candidate(plan.op_id, plan.partition_index, plan.target_node)
        active = _Active(plan, ReplicaPair(original, candidate), cutover)
        self._active[plan.key] = active
        self.engine.start_duplication(plan.op_id, plan.partition_index, candidate)
        self._move(active, MigrationPhase.DUPLICATING)
        return True

    def transfer_snapshot(self, plan: MigrationPlan) -> bool:
        """Snapshot the original and ship it to the candidate.

        Returns False while the original has not yet applied everything that
        was routed to it before duplication began.
        """
        active = self._require(plan, MigrationPhase.DUPLICATING)
        original = active.pair.original
        if not original.state.tv.dominates(active.cutover):
            return False
        try:
            snap = snapshot(original.state)
        except Exception as exc:
            self.abort(plan, f"snapshot failed: {exc}")
            raise SnapshotFailure(str(exc)) from exc
        self._move(active, MigrationPhase.SNAPSHOTTING)
        original.output_listener = active.pair.record
        self.engine.send_snapshot(original, active.pair.candidate, snap)
        active.snapshot_sent = True
        return True

    def on_snapshot_delivered(self, candidate: Any, payload: bytes) -> None:
        """Called by the engine when the snapshot message reaches the candidate."""
        active = self._active.get((candidate.op.op_id, candidate.partition))
        if active is None or active.pair.candidate is not candidate:
            return
        if active.plan.phase is not MigrationPhase.SNAPSHOTTING:
            return  # a duplicated copy of a snapshot already installed
        try:
            restored = candidate.install_snapshot(payload)
        except Exception as exc:
            self.abort(active.plan, f"SnapshotFailure: transfer rejected ({type(exc).__name__}: {exc})")
            return
        candidate.output_listener = active.pair.record
        self._move(active, MigrationPhase.SYNCING,
                   note=f"restored tv={restored}")
        candidate.pump()

    def finalize(self, plan: MigrationPlan) -> bool:
        if plan.phase is MigrationPhase.SWITCHED:
            return True
        active = self._require(plan, MigrationPhase.SYNCING)
        pair = active.pair
        self.engine.retire(pair.original)
        pair.candidate.output_listener = None
        self._move(active, MigrationPhase.SWITCHED,
                   note="state hash checked" if active.hash_checked else "state hash not compared")
        del self._active[plan.key]
        self.completed.append(plan)
        return True

    def abort(self, plan: MigrationPlan, reason: str) -> None:
        active = self._active.pop(plan.key, None)
        if active is None:
            return
        pair = active.pair
        pair.original.output_listener = None
        self.engine.retire(pair.candidate)
        log.warning("migration of %s/%s aborted: %s", plan.op_id, plan.partition_index, reason)
        self._move(active, MigrationPhase.SINGLE, note=f"aborted: {reason}")
        self.aborted.append((plan, reason))

    def _require(self, plan: MigrationPlan, phase: MigrationPhase) -> _Active:
        active = self._active.get(plan.key)
        if active is None or plan.phase is not phase:
            raise PhaseError(
                f"operator {plan.op_id}/{plan.partition_index} is {plan.phase.value}, expected {phase.value}"
            )
        return active

    def tick(self) -> None:
        """Advance every active migration as far as the current state allows."""
        for key in list(self._active):
            active = self._active.get(key)
            if active is None:
                continue
            plan = active.plan
            if plan.phase is MigrationPhase.DUPLICATING:
                try:
                    self.transfer_snapshot(plan)
                except SnapshotFailure:
                    continue
            elif plan.phase is MigrationPhase.SYNCING:
                self._tick_syncing(active)

    def _tick_syncing(self, active: _Active) -> None:
        pair = active.pair
        pair.original_done = pair.original.input_closed
        pair.candidate_done = pair.candidate.input_closed
        try:
            in_sync = check_sync(pair, active.plan.sync_window)
        except Divergence as exc:
            self.divergences.append(f"op {active.plan.op_id}/{active.plan.partition_index}: {exc}")
            self.abort(active.plan, f"divergence: {exc}")
            return
        if not in_sync:
            return
        if active.synced_at is None:
            active.synced_at = self.engine.step
        a, b = pair.original.state, pair.candidate.state
        if a.tv == b.tv:
            if state_hash(a) != state_hash(b):
                msg = f"state hash differs at tv {a.tv}"
                self.divergences.append(f"op {active.plan.op_id}/{active.plan.partition_index}: {msg}")
                self.abort(active.plan, f"divergence: {msg}")
                return
            active.hash_checked = True
        elif self.engine.step - active.synced_at < self.finalize_grace:
            return
        self.finalize(active.plan)


def start_migration(coordinator: MigrationCoordinator, plan: MigrationPlan) -> bool:
    return coordinator.start_migration(plan)


def transfer_snapshot(coordinator: MigrationCoordinator, plan: MigrationPlan) -> bool:
    return coordinator.transfer_snapshot(plan)


def finalize(coordinator: MigrationCoordinator, plan: MigrationPlan) -> bool:
    return coordinator.finalize(plan)
