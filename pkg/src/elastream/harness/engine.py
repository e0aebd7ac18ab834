"""Runs a pipeline on the simulated network.

Endpoints (sources, operator replicas, sinks) live on nodes and talk through
:class:`~elastream.simnet.SimNetwork`.  Every endpoint that consumes streams
has a :class:`~elastream.ordering.ChannelDemux` in front of a
:class:`~elastream.ordering.MergeBuffer`; replicas then fold released events
through :func:`~elastream.operator_runtime.process`.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from ..enclave_sim import (
    AuthenticationFailure,
    EnclaveContext,
    PagedStateStore,
    ReplayDetected,
    AttestationFailure,
    attest,
    channel_key,
    decrypt_event,
    derive_key,
    encrypt_event,
    measure,
    seal,
    unseal,
)
from ..event_core import CLOSE_TS, Event, SourceId, TimestampVector
from ..migration import MigrationCoordinator, MigrationPlan, MigrationRecord
from ..operator_runtime import (
    OUTPUT_STREAM_BASE,
    DictStore,
    FanoutOverflow,
    LogicFailure,
    OperatorDescriptor,
    PartitionState,
    StateSnapshot,
    output_stream_id,
    output_watermark,
    partition_for,
    process,
    restore,
    state_hash,
)
from ..ordering import ChannelDemux, MergeBuffer, OrderingError, StallDetected
from ..simnet import Delivery, SimNetwork
from .scenario import Scenario

log = logging.getLogger(__name__)


@dataclass
class DataMsg:
    sender: int
    dest: int
    stream: SourceId
    body: Any  # Event, or encrypted wire bytes in enclave mode


@dataclass
class CloseMsg:
    sender: int
    dest: int
    stream: SourceId


@dataclass
class SnapshotMsg:
    sender: int
    dest: int
    body: bytes


def describe(message: Any) -> str:
    if isinstance(message, DataMsg):
        body = message.body
        if isinstance(body, Event):
            return f"data {message.sender}->{message.dest} src={body.source} ts={body.ts} kind={body.kind.name}"
        return f"data {message.sender}->{message.dest} stream={message.stream} sealed={len(body)}B"
    if isinstance(message, CloseMsg):
        return f"close {message.sender}->{message.dest} stream={message.stream}"
    if isinstance(message, SnapshotMsg):
        return f"snapshot {message.sender}->{message.dest} {len(message.body)}B"
    return repr(message)


class Endpoint:
    def __init__(self, engine: Engine, ep_id: int, node: int, ctx: EnclaveContext | None):
        self.engine = engine
        self.ep_id = ep_id
        self.node = node
        self.ctx = ctx
        self.retired = False
        self.sent_to: dict[int, set[SourceId]] = {}


class SourceEndpoint(Endpoint):
    def __init__(self, engine: Engine, ep_id: int, node: int, ctx, source_id: SourceId):
        super().__init__(engine, ep_id, node, ctx)
        self.source_id = source_id


class _Consumer(Endpoint):
    def __init__(self, engine: Engine, ep_id: int, node: int, ctx, inputs: frozenset[SourceId]):
        super().__init__(engine, ep_id, node, ctx)
        self.demux = ChannelDemux()
        self.buffer = MergeBuffer(inputs, stall_limit=engine.scenario.stall_limit)
        self.ingested = 0

    def receive(self, channel: int, event: Event) -> None:
        for released in self.demux.offer(channel, event):
            self.buffer.ingest(released)
            if released.is_data:
                self.ingested += 1
        self.pump()

    def close_channel(self, channel: int, stream: SourceId) -> None:
        for released in self.demux.close(channel, stream):
            self.buffer.ingest(released)
            if released.is_data:
                self.ingested += 1
        self.pump()

    @property
    def input_closed(self) -> bool:
        return self.buffer.low_watermark >= CLOSE_TS and len(self.buffer) == 0

    def pump(self) -> None:
        raise NotImplementedError


class Replica(_Consumer):
    def __init__(self, engine: Engine, ep_id: int, node: int, ctx, op: OperatorDescriptor,
                 partition: int, inputs: frozenset[SourceId], candidate: bool):
        super().__init__(engine, ep_id, node, ctx, inputs)
        self.op = op
        self.partition = partition
        self.logic = op.make_logic()
        self.is_candidate = candidate
        self.state: PartitionState | None = None
        if not candidate:
            self.state = PartitionState.fresh(op.op_id, partition, self.logic, self.make_store())
        self.processed = 0
        self.dropped_duplicates = 0
        self.out_wm = 0
        self.halted = False
        self.output_listener: Callable[[Replica, list[Event]], None] | None = None
        self.processed_at: dict[tuple[SourceId, int], int] = {}

    def __repr__(self) -> str:
        role = "candidate" if self.is_candidate else "original"
        return f"Replica(op={self.op.op_id}, partition={self.partition}, node={self.node}, {role})"

    @property
    def stream_id(self) -> SourceId:
        return output_stream_id(self.op.op_id, self.partition)

    def make_store(self):
        if self.ctx is None:
            return DictStore()
        return PagedStateStore(self.ctx, page_size=self.engine.scenario.enclave.page_size)

    def install_snapshot(self, payload: bytes) -> TimestampVector:
        if self.ctx is not None:
            snap = unseal(payload, self.ctx, expect=(self.op.op_id, self.partition))
        else:
            snap = StateSnapshot.decode(payload)
        if (snap.op_id, snap.partition_index) != (self.op.op_id, self.partition):
            raise ValueError(f"snapshot belongs to {snap.op_id}/{snap.partition_index}")
        self.state = restore(snap, self.logic, self.make_store)
        return snap.tv

    def pump(self) -> None:
        if self.state is None or self.retired or self.halted:
            return
        if self.op.commutative:
            events = self.buffer.drain_relaxed()
        else:
            events = self.buffer.drain()
        outputs: list[Event] = []
        bits = self.engine.scenario.fanout_bits
        step = self.engine.step
        for event in events:
            if self.state.tv.is_duplicate(event):
                self.dropped_duplicates += 1
                continue
            try:
                outputs.extend(process(self.state, event, self.logic, bits))
            except (LogicFailure, FanoutOverflow) as exc:
                self.halted = True
                self.engine.logic_failures.append(f"{self!r}: {exc}")
                log.error("partition halted: %s", exc)
                break
            self.processed += 1
            if self.engine.record_processing:
                self.processed_at[(event.source, event.ts)] = step
        if not self.op.commutative:
            wm = output_watermark(self.buffer.low_watermark, bits)
            if wm > self.out_wm:
                self.out_wm = wm
                outputs.append(Event.watermark(self.stream_id, wm))
        if outputs:
            if self.output_listener is not None:
                self.output_listener(self, outputs)
            self.engine.emit_from_replica(self, outputs)


class SinkEndpoint(_Consumer):
    def __init__(self, engine: Engine, ep_id: int, node: int, ctx, inputs: frozenset[SourceId]):
        super().__init__(engine, ep_id, node, ctx, inputs)
        self.log: list[Event] = []
        self.released_at: list[int] = []

    def pump(self) -> None:
        for event in self.buffer.drain():
            self.log.append(event)
            self.released_at.append(self.engine.step)


@dataclass
class EngineResult:
    sink_log: list[Event]
    sink_release_steps: list[int]
    steps: int
    generated: int
    delivered: int
    input_duplicates: int
    output_duplicates: int
    replays_dropped: int
    auth_failures: int
    discarded_after_retire: int
    records: list[MigrationRecord]
    divergences: list[str]
    completed_migrations: int
    aborted_migrations: list[str]
    logic_failures: list[str]
    max_resident_bytes: int
    resident_probe_violations: int
    evictions: int
    processed_at: dict[tuple[int, int], dict[tuple[int, int], int]]
    migration_windows: list[tuple[int, int, int, int]]
    final_state_hashes: dict[tuple[int, int], str]
    wire_capture: list[bytes] = field(default_factory=list)


class Engine:
    def __init__(self, scenario: Scenario, *, enclave: bool | None = None,
                 migrations: list | None = None, trace=None, capture: bool = False,
                 record_processing: bool = True, corrupt_transfer: bool = False):
        self.scenario = scenario
        self.enclave = scenario.enclave.enabled if enclave is None else enclave
        self.migrations = sorted(scenario.migrations if migrations is None else migrations,
                                 key=lambda m: m.at)
        self.capture = capture
        self.wire: list[bytes] = []
        self.record_processing = record_processing
        self.corrupt_transfer = corrupt_transfer
        self.net = SimNetwork(scenario.seed, scenario.links, scenario.default_link,
                              trace=trace, describe=describe)
        self.coordinator = MigrationCoordinator(self)
        self.secret = scenario.enclave.secret_bytes(scenario.seed)
        self.logic_failures: list[str] = []
        self.replays_dropped = 0
        self.auth_failures = 0
        self.discarded = 0
        self.resident_probe_violations = 0
        self.max_resident = 0
        self.evictions_retired = 0
        self._ids = itertools.count(1)
        self.endpoints: dict[int, Endpoint] = {}
        self.sources: dict[SourceId, SourceEndpoint] = {}
        self.routes: dict[tuple[int, int], list[Replica]] = {}
        self.all_replicas: list[Replica] = []
        self.startup_replicas: set[int] = set()
        self.routed: dict[tuple[int, int], TimestampVector] = {}
        self.routed_wm: dict[tuple[int, int], dict[SourceId, int]] = {}
        self.migration_windows: list[tuple[int, int, int, int]] = []
        self._build()

    # -- construction -------------------------------------------------
    @property
    def step(self) -> int:
        return self.net.step

    def node_alive(self, node: int) -> bool:
        return node in self.scenario.nodes and node not in self.scenario.down_nodes

    def _context(self, ep_id: int, op: OperatorDescriptor | None) -> EnclaveContext | None:
        if not self.enclave:
            return None
        if op is not None:
            sealing = derive_key(self.secret, "seal", op.op_id)
            measurement = measure(op.make_logic().code_identity(), op.params)
        else:
            sealing = derive_key(self.secret, "seal-endpoint", ep_id)
            measurement = b"\x00" * 32
        return EnclaveContext(ep_id, sealing, measurement,
                              memory_budget_bytes=self.scenario.enclave.budget_bytes)

    def _attest(self, replica: Replica) -> None:
        if replica.ctx is None:
            return
        expected = self.scenario.expected_measurement(replica.op)
        if not attest(replica.ctx, expected):
            raise AttestationFailure(
                f"operator {replica.op.name!r} (id {replica.op.op_id}) failed attestation "
                f"on node {replica.node}"
            )

    def _new_replica(self, op: OperatorDescriptor, partition: int, node: int, candidate: bool) -> Replica:
        ep_id = next(self._ids)
        replica = Replica(self, ep_id, node, self._context(ep_id, op), op, partition,
                          self.scenario.input_streams(op), candidate)
        self._attest(replica)
        self.endpoints[ep_id] = replica
        self.all_replicas.append(replica)
        if candidate:
            self._expect_owners(replica)
        return replica

    def _expect_owners(self, consumer: _Consumer) -> None:
        for stream in sorted(consumer.buffer.expected_sources):
            owner = self._stream_owner(stream)
            if owner is not None:
                consumer.demux.expect(owner.ep_id, stream)

    def _build(self) -> None:
        sc = self.scenario
        for src in sc.sources:
            ep_id = next(self._ids)
            ep = SourceEndpoint(self, ep_id, src.node, self._context(ep_id, None), src.source_id)
            self.endpoints[ep_id] = ep
            self.sources[src.source_id] = ep
        for op in sc.operators:
            for part in range(op.parallelism):
                replica = self._new_replica(op, part, sc.placement[op.op_id][part], candidate=False)
                self.startup_replicas.add(replica.ep_id)
                self.routes[(op.op_id, part)] = [replica]
                self.routed[(op.op_id, part)] = TimestampVector()
                self.routed_wm[(op.op_id, part)] = {}
        ep_id = next(self._ids)
        self.sink = SinkEndpoint(self, ep_id, sc.sink_node, self._context(ep_id, None),
                                 sc.sink_streams())
        self.endpoints[ep_id] = self.sink
        for ep in self.endpoints.values():
            if isinstance(ep, _Consumer):
                self._expect_owners(ep)

    # -- hooks used by the migration coordinator ----------------------
    def replica(self, op_id: int, partition: int) -> Replica:
        return next(r for r in self.routes[(op_id, partition)] if not r.is_candidate)

    def routed_vector(self, op_id: int, partition: int) -> TimestampVector:
        return self.routed[(op_id, partition)]

    def spawn_candidate(self, op_id: int, partition: int, node: int) -> Replica:
        op = self.scenario.operator(op_id)
        return self._new_replica(op, partition, node, candidate=True)

    def start_duplication(self, op_id: int, partition: int, candidate: Replica) -> None:
        self.routes[(op_id, partition)].append(candidate)
        # repeat the newest watermark of every input so the candidate's merge can progress
        for stream, ts in sorted(self.routed_wm[(op_id, partition)].items()):
            owner = self._stream_owner(stream)
            if owner is not None:
                self._send(owner, candidate, stream, Event.watermark(stream, ts))

    def send_snapshot(self, original: Replica, candidate: Replica, snap: StateSnapshot) -> None:
        body = seal(snap, original.ctx).encode() if original.ctx is not None else snap.encode()
        if self.corrupt_transfer:
            flipped = bytearray(body)
            flipped[len(flipped) // 2] ^= 0x01
            body = bytes(flipped)
        if self.capture:
            self.wire.append(body)
        self.net.send(original.node, candidate.node, SnapshotMsg(original.ep_id, candidate.ep_id, body),
                      channel=(original.ep_id, candidate.ep_id))

    def retire(self, replica: Replica) -> None:
        if replica.retired:
            return
        replica.retired = True
        key = (replica.op.op_id, replica.partition)
        self.routes[key] = [r for r in self.routes[key] if r is not replica]
        if replica.is_candidate is False and self.routes[key]:
            successor = self.routes[key][0]
            successor.is_candidate = False
            for ep in self.endpoints.values():
                if isinstance(ep, _Consumer) and not ep.retired and replica.stream_id in ep.buffer.expected_sources:
                    ep.demux.expect(successor.ep_id, replica.stream_id)
        for dest, streams in sorted(replica.sent_to.items()):
            for stream in sorted(streams):
                self.net.send(replica.node, self.endpoints[dest].node,
                              CloseMsg(replica.ep_id, dest, stream), channel=(replica.ep_id, dest))
        self._account_store(replica)

    # -- routing ------------------------------------------------------
    def _stream_owner(self, stream: SourceId) -> Endpoint | None:
        if stream < OUTPUT_STREAM_BASE:
            return self.sources.get(stream)
        for key, replicas in self.routes.items():
            if replicas and output_stream_id(*key) == stream:
                return replicas[0]
        return None

    def _send(self, sender: Endpoint, dest: Endpoint, stream: SourceId, event: Event) -> None:
        if sender.ctx is not None and dest.ctx is not None:
            for a, b in ((sender.ctx, dest.ep_id), (dest.ctx, sender.ep_id)):
                if b not in a.channel_keys:
                    a.channel_keys[b] = channel_key(self.secret, a.enclave_id, b)
            body: Any = encrypt_event(event, dest.ep_id, sender.ctx)
            if self.capture:
                self.wire.append(body)
        else:
            body = event
            if self.capture:
                self.wire.append(event.encode())
        sender.sent_to.setdefault(dest.ep_id, set()).add(stream)
        self.net.send(sender.node, dest.node, DataMsg(sender.ep_id, dest.ep_id, stream, body),
                      channel=(sender.ep_id, dest.ep_id))

    def _route(self, sender: Endpoint, stream: SourceId, event: Event, consumers: list[int],
               to_sink: bool) -> None:
        for op_id in consumers:
            op = self.scenario.operator(op_id)
            if event.is_data:
                parts = [partition_for(event.key, op.parallelism)]
            else:
                parts = range(op.parallelism)
            for part in parts:
                key = (op_id, part)
                if event.is_data:
                    self.routed[key] = self.routed[key].advance(stream, event.ts)
                else:
                    marks = self.routed_wm[key]
                    marks[stream] = max(marks.get(stream, 0), event.ts)
                for replica in self.routes[key]:
                    self._send(sender, replica, stream, event)
        if to_sink:
            self._send(sender, self.sink, stream, event)

    def emit_from_source(self, source: SourceEndpoint, event: Event) -> None:
        consumers = self.scenario.source_consumers(source.source_id)
        self._route(source, source.source_id, event, consumers, False)

    def emit_from_replica(self, replica: Replica, events: list[Event]) -> None:
        consumers = self.scenario.op_consumers(replica.op.op_id)
        to_sink = replica.op.op_id in self.scenario.sink_inputs
        for event in events:
            self._route(replica, replica.stream_id, event, consumers, to_sink)

    # -- delivery -----------------------------------------------------
    def _deliver(self, delivery: Delivery) -> None:
        msg = delivery.message
        dest = self.endpoints.get(msg.dest)
        if dest is None or dest.retired:
            self.discarded += 1
            return
        if isinstance(msg, SnapshotMsg):
            self.coordinator.on_snapshot_delivered(dest, msg.body)
        elif isinstance(msg, CloseMsg):
            dest.close_channel(msg.sender, msg.stream)
        else:
            body = msg.body
            if not isinstance(body, Event):
                try:
                    body = decrypt_event(body, msg.sender, dest.ctx)
                except ReplayDetected:
                    self.replays_dropped += 1
                    return
                except AuthenticationFailure:
                    self.auth_failures += 1
                    return
            dest.receive(msg.sender, body)

    def _account_store(self, replica: Replica) -> None:
        store = replica.state.store if replica.state is not None else None
        if isinstance(store, PagedStateStore):
            self.max_resident = max(self.max_resident, store.max_resident_bytes)
            self.evictions_retired += store.evictions

    def _probe_memory(self) -> None:
        for replica in self.all_replicas:
            if replica.state is None or replica.retired:
                continue
            store = replica.state.store
            if isinstance(store, PagedStateStore):
                if store.resident_bytes > store.budget or store.max_resident_bytes > store.budget:
                    self.resident_probe_violations += 1
                self.max_resident = max(self.max_resident, store.max_resident_bytes)

    # -- main loop ----------------------------------------------------
    def run(self, generated: list, max_extra_steps: int = 100_000) -> EngineResult:
        sc = self.scenario
        by_step: dict[int, list[Event]] = {}
        for g in generated:
            by_step.setdefault(g.step, []).append(g.event)
        last_emit = max(by_step) if by_step else 0
        triggers = list(self.migrations)
        step = 0
        while True:
            self.net.step = step
            for event in by_step.get(step, ()):
                self.emit_from_source(self.sources[event.source], event)
            self.net.deliver_step(self._deliver)
            while triggers and triggers[0].at <= step:
                self._trigger(triggers.pop(0))
            self.coordinator.tick()
            self.net.deliver_step(self._deliver)
            if self.enclave:
                self._probe_memory()
            if (step >= last_emit and not triggers and not self.coordinator.busy
                    and self.net.pending() == 0):
                break
            step += 1
            if step > last_emit + max_extra_steps:
                raise StallDetected(
                    f"run did not quiesce {max_extra_steps} steps after the last source event"
                )
        self._check_drained()
        return self._result(generated)

    def _check_drained(self) -> None:
        """Once the network is quiet, any event still buffered can never be released."""
        for ep in self.endpoints.values():
            if not isinstance(ep, _Consumer) or ep.retired or len(ep.buffer) == 0:
                continue
            if isinstance(ep, Replica) and (ep.state is None or ep.halted):
                continue
            buf = ep.buffer
            silent = sorted(s for s in buf.expected_sources if buf.watermarks.get(s, 0) < CLOSE_TS)
            raise StallDetected(
                f"{len(buf)} events stuck at endpoint {ep.ep_id} on node {ep.node} after the run "
                f"went quiet; low-watermark {buf.low_watermark}, unfinished sources: {silent}"
            )

    def _trigger(self, spec) -> None:
        original = self.replica(spec.op_id, spec.partition)
        plan = MigrationPlan(spec.op_id, spec.partition, original.node, spec.target,
                             sync_window=self.scenario.sync_window)
        started = self.step
        self.coordinator.start_migration(plan)
        self.migration_windows.append((spec.op_id, spec.partition, original.ep_id, started))

    def _result(self, generated: list) -> EngineResult:
        input_dups = 0
        output_dups = 0
        consumers: list[_Consumer] = [*self.all_replicas, self.sink]
        for consumer in consumers:
            for source, count in consumer.demux.duplicates_by_source.items():
                if source >= OUTPUT_STREAM_BASE:
                    output_dups += count
                else:
                    input_dups += count
        for replica in self.all_replicas:
            input_dups += replica.dropped_duplicates
        evictions = self.evictions_retired
        for replica in self.all_replicas:
            if not replica.retired:
                self._account_store(replica)
                store = replica.state.store if replica.state is not None else None
                if isinstance(store, PagedStateStore):
                    evictions += store.evictions
                    if self.capture:
                        self.wire.extend(b.encode() for b in store.backing.values())
        processed_at = {
            (r.op.op_id, r.partition): r.processed_at
            for r in self.all_replicas if r.ep_id in self.startup_replicas
        }
        hashes = {}
        for key, replicas in sorted(self.routes.items()):
            live = [r for r in replicas if r.state is not None]
            if live:
                hashes[key] = state_hash(live[0].state).hex()
        co = self.coordinator
        return EngineResult(
            sink_log=self.sink.log,
            sink_release_steps=self.sink.released_at,
            steps=self.step,
            generated=sum(1 for g in generated if g.event.is_data),
            delivered=self.net.delivered,
            input_duplicates=input_dups,
            output_duplicates=output_dups,
            replays_dropped=self.replays_dropped,
            auth_failures=self.auth_failures,
            discarded_after_retire=self.discarded,
            records=co.records,
            divergences=co.divergences,
            completed_migrations=len(co.completed),
            aborted_migrations=[reason for _, reason in co.aborted],
            logic_failures=self.logic_failures,
            max_resident_bytes=self.max_resident,
            resident_probe_violations=self.resident_probe_violations,
            evictions=evictions,
            processed_at=processed_at,
            migration_windows=self.migration_windows,
            final_state_hashes=hashes,
            wire_capture=self.wire,
        )
