"""Stateful operator partitions: deterministic processing, snapshots, restore.

Operator logic is written against a small key/value :class:`StateView`; the
runtime owns the timestamp vector, output timestamping and the snapshot
encoding, so two replicas fed the same ordered input emit byte-identical
events and reach the same state hash.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Iterator, Mapping, Protocol

from .event_core import Event, EventKind, MAX_TIMESTAMP, SourceId, Timestamp, TimestampVector

DEFAULT_FANOUT_BITS = 16
SNAPSHOT_MAGIC = b"SM3G"
SNAPSHOT_VERSION = 1

_HEADER = struct.Struct(">4sBQIQ")
_TV_ENTRY = struct.Struct(">QQ")
_U32 = struct.Struct(">I")
_ENVELOPE_COUNTERS = struct.Struct(">BQI")

OUTPUT_STREAM_BASE = 1 << 40


class OperatorError(Exception):
    """Base class for operator runtime failures."""


class LogicFailure(OperatorError):
    pass


class SerializationFailure(OperatorError):
    pass


class HashMismatch(OperatorError):
    pass


class VersionMismatch(OperatorError):
    pass


class FanoutOverflow(OperatorError):
    pass


class UnknownLogic(OperatorError):
    pass


def output_stream_id(op_id: int, partition: int) -> SourceId:
    """Source id stamped on every output of one operator partition, whichever replica emits it."""
    return OUTPUT_STREAM_BASE | (op_id << 20) | partition


def partition_for(key: bytes, parallelism: int) -> int:
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") % parallelism


def output_timestamp(input_ts: Timestamp, out_seq: int, fanout_bits: int = DEFAULT_FANOUT_BITS) -> Timestamp:
    # an input may emit at most 2^bits - 1 events; the last slot stays unused
    if out_seq >= (1 << fanout_bits) - 1:
        raise FanoutOverflow(
            f"{out_seq + 1} emissions at input ts {input_ts} reach 2^{fanout_bits}"
        )
    ts = (input_ts << fanout_bits) + (out_seq % (1 << fanout_bits))
    if ts > MAX_TIMESTAMP:
        raise FanoutOverflow(f"input ts {input_ts} does not fit after a {fanout_bits}-bit shift")
    return ts


def output_watermark(low_watermark: Timestamp, fanout_bits: int = DEFAULT_FANOUT_BITS) -> Timestamp:
    """Largest output timestamp that can no longer be produced once inputs up to ``low_watermark`` are done."""
    if low_watermark == 0:
        return 0
    return min(((low_watermark + 1) << fanout_bits) - 1, MAX_TIMESTAMP)


class StateView(Protocol):
    def get(self, key: bytes) -> bytes | None: ...

    def put(self, key: bytes, value: bytes) -> None: ...


class KeyValueStore(Protocol):
    """Backing store of a partition's user state (a dict, or a paged enclave store)."""

    def get(self, key: bytes) -> bytes | None: ...

    def put(self, key: bytes, value: bytes) -> None: ...

    def items(self) -> Iterator[tuple[bytes, bytes]]: ...


class DictStore:
    def __init__(self, entries: Mapping[bytes, bytes] | None = None):
        self._data: dict[bytes, bytes] = dict(entries or {})

    def get(self, key: bytes) -> bytes | None:
        return self._data.get(key)

    def put(self, key: bytes, value: bytes) -> None:
        self._data[key] = value

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        return iter(sorted(self._data.items()))

    def __len__(self) -> int:
        return len(self._data)


class _Overlay:
    """Write buffer so a failing logic call leaves the store untouched."""

    def __init__(self, base: KeyValueStore):
        self._base = base
        self.writes: dict[bytes, bytes] = {}

    def get(self, key: bytes) -> bytes | None:
        if key in self.writes:
            return self.writes[key]
        return self._base.get(key)

    def put(self, key: bytes, value: bytes) -> None:
        if not isinstance(value, (bytes, bytearray)):
            raise TypeError("state values must be bytes")
        self.writes[key] = bytes(value)


class OperatorLogic:
    """Base class for operator logic.

    Subclasses set ``logic_id`` and implement :meth:`apply`, which reads and
    writes per-key byte values through ``state`` and returns ``(key, payload)``
    pairs to emit.  Logic must be a pure function of state and event.
    """

    logic_id: ClassVar[str]
    format_version: ClassVar[int] = 1
    commutative: ClassVar[bool] = False

    def __init__(self, params: Mapping[str, str] | None = None):
        self.params = dict(params or {})

    @classmethod
    def code_identity(cls) -> str:
        return f"{cls.__module__}.{cls.__qualname__}:{cls.logic_id}@{cls.format_version}"

    def apply(self, state: StateView, event: Event) -> list[tuple[bytes, bytes]]:
        raise NotImplementedError


LOGIC_REGISTRY: dict[str, type[OperatorLogic]] = {}


def register_logic(cls: type[OperatorLogic]) -> type[OperatorLogic]:
    LOGIC_REGISTRY[cls.logic_id] = cls
    return cls


def resolve_logic(logic_id: str) -> type[OperatorLogic]:
    try:
        return LOGIC_REGISTRY[logic_id]
    except KeyError:
        raise UnknownLogic(f"no operator logic registered as {logic_id!r}") from None


@dataclass(frozen=True)
class OperatorDescriptor:
    op_id: int
    name: str
    logic_id: str
    parallelism: int = 1
    commutative: bool = False
    params: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ValueError(f"operator {self.name}: parallelism must be >= 1")
        resolve_logic(self.logic_id)

    def make_logic(self) -> OperatorLogic:
        return resolve_logic(self.logic_id)(self.params)


@dataclass
class PartitionState:
    op_id: int
    partition_index: int
    logic_id: str
    format_version: int = 1
    tv: TimestampVector = field(default_factory=TimestampVector)
    store: KeyValueStore = field(default_factory=DictStore)
    out_seq: int = 0
    # ties across sources share an input ts; emissions under one ts are numbered from 0
    last_input_ts: Timestamp = 0
    ts_emit_index: int = 0

    @classmethod
    def fresh(cls, op_id: int, partition_index: int, logic: OperatorLogic,
              store: KeyValueStore | None = None) -> PartitionState:
        return cls(op_id, partition_index, logic.logic_id, logic.format_version,
                   store=store if store is not None else DictStore())

    @property
    def stream_id(self) -> SourceId:
        return output_stream_id(self.op_id, self.partition_index)


@dataclass(frozen=True)
class StateSnapshot:
    op_id: int
    partition_index: int
    tv: TimestampVector
    out_seq: int
    user_state: bytes
    state_hash: bytes

    def encode(self) -> bytes:
        return _snapshot_body(self.op_id, self.partition_index, self.out_seq,
                              self.tv, self.user_state) + self.state_hash

    def header(self) -> bytes:
        return _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.op_id,
                            self.partition_index, self.out_seq)

    @classmethod
    def decode(cls, data: bytes) -> StateSnapshot:
        """Parse and verify a snapshot file; raises HashMismatch on any integrity failure."""
        if len(data) < _HEADER.size + 4 + 4 + 32:
            raise HashMismatch("snapshot too short")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise HashMismatch("snapshot hash does not verify")
        try:
            magic, version, op_id, partition, out_seq = _HEADER.unpack_from(body, 0)
            pos = _HEADER.size
            (count,) = _U32.unpack_from(body, pos)
            pos += _U32.size
            entries = {}
            for _ in range(count):
                source, ts = _TV_ENTRY.unpack_from(body, pos)
                entries[source] = ts
                pos += _TV_ENTRY.size
            (size,) = _U32.unpack_from(body, pos)
            pos += _U32.size
            user_state = body[pos : pos + size]
            pos += size
        except struct.error as exc:
            raise SerializationFailure(f"malformed snapshot: {exc}") from exc
        if magic != SNAPSHOT_MAGIC or version != SNAPSHOT_VERSION:
            raise VersionMismatch(f"unsupported snapshot format {magic!r} v{version}")
        if pos != len(body) or len(user_state) != size:
            raise SerializationFailure("snapshot length fields are inconsistent")
        return cls(op_id, partition, TimestampVector(entries), out_seq, bytes(user_state), digest)


def _snapshot_body(op_id: int, partition: int, out_seq: int, tv: TimestampVector,
                   user_state: bytes) -> bytes:
    entries = [(s, t) for s, t in tv.items() if t]
    parts = [
        _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, op_id, partition, out_seq),
        _U32.pack(len(entries)),
    ]
    parts.extend(_TV_ENTRY.pack(s, t) for s, t in entries)
    parts.append(_U32.pack(len(user_state)))
    parts.append(user_state)
    return b"".join(parts)


def _encode_user_state(state: PartitionState) -> bytes:
    logic_id = state.logic_id.encode()
    parts = [
        _U32.pack(len(logic_id)),
        logic_id,
        _ENVELOPE_COUNTERS.pack(state.format_version, state.last_input_ts, state.ts_emit_index),
    ]
    items = list(state.store.items())
    parts.append(_U32.pack(len(items)))
    for key, value in items:
        parts += [_U32.pack(len(key)), key, _U32.pack(len(value)), value]
    return b"".join(parts)


def _decode_user_state(data: bytes) -> tuple[str, int, int, int, dict[bytes, bytes]]:
    try:
        (n,) = _U32.unpack_from(data, 0)
        pos = _U32.size
        logic_id = data[pos : pos + n].decode()
        pos += n
        version, last_ts, emit_index = _ENVELOPE_COUNTERS.unpack_from(data, pos)
        pos += _ENVELOPE_COUNTERS.size
        (count,) = _U32.unpack_from(data, pos)
        pos += _U32.size
        entries = {}
        for _ in range(count):
            (klen,) = _U32.unpack_from(data, pos)
            pos += _U32.size
            key = data[pos : pos + klen]
            pos += klen
            (vlen,) = _U32.unpack_from(data, pos)
            pos += _U32.size
            entries[bytes(key)] = bytes(data[pos : pos + vlen])
            pos += vlen
    except (struct.error, UnicodeDecodeError) as exc:
        raise VersionMismatch(f"unreadable user-state envelope: {exc}") from exc
    return logic_id, version, last_ts, emit_index, entries


def process(state: PartitionState, event: Event, logic: OperatorLogic,
            fanout_bits: int = DEFAULT_FANOUT_BITS) -> list[Event]:
    """Fold one ordered, non-duplicate data event into ``state``; return the emission.

    The caller drops duplicates (``state.tv.is_duplicate(event)``) before calling.
    """
    if event.kind is not EventKind.DATA:
        raise ValueError("process() only accepts data events")
    overlay = _Overlay(state.store)
    try:
        outputs = logic.apply(overlay, event)
    except Exception as exc:
        raise LogicFailure(
            f"{logic.logic_id} failed on event {event.source}@{event.ts}: {exc}"
        ) from exc

    index = state.ts_emit_index if event.ts == state.last_input_ts else 0
    emitted = []
    for key, payload in outputs:
        ts = output_timestamp(event.ts, index, fanout_bits)
        emitted.append(Event(state.stream_id, ts, bytes(key), bytes(payload)))
        index += 1

    for key, value in overlay.writes.items():
        state.store.put(key, value)
    state.tv = state.tv.advance(event.source, event.ts)
    state.out_seq += len(emitted)
    if emitted:
        # ordered delivery keeps equal input timestamps adjacent, so only emitting
        # events need to move the counter; silent folds stay order-independent
        state.last_input_ts = event.ts
        state.ts_emit_index = index
    return emitted


def snapshot(state: PartitionState) -> StateSnapshot:
    try:
        user_state = _encode_user_state(state)
    except Exception as exc:
        raise SerializationFailure(f"cannot serialize partition state: {exc}") from exc
    body = _snapshot_body(state.op_id, state.partition_index, state.out_seq, state.tv, user_state)
    return StateSnapshot(state.op_id, state.partition_index, state.tv, state.out_seq,
                         user_state, hashlib.sha256(body).digest())


def state_hash(state: PartitionState) -> bytes:
    return snapshot(state).state_hash


def restore(snap: StateSnapshot, logic: OperatorLogic,
            store_factory: Callable[[], KeyValueStore] = DictStore) -> PartitionState:
    body = _snapshot_body(snap.op_id, snap.partition_index, snap.out_seq, snap.tv, snap.user_state)
    if hashlib.sha256(body).digest() != snap.state_hash:
        raise HashMismatch(f"snapshot of op {snap.op_id}/{snap.partition_index} fails its hash")
    logic_id, version, last_ts, emit_index, entries = _decode_user_state(snap.user_state)
    if logic_id != logic.logic_id:
        raise VersionMismatch(f"snapshot was taken under {logic_id!r}, not {logic.logic_id!r}")
    if version != logic.format_version:
        raise VersionMismatch(
            f"{logic_id} state format v{version}, logic expects v{logic.format_version}"
        )
    store = store_factory()
    for key, value in entries.items():
        store.put(key, value)
    return PartitionState(snap.op_id, snap.partition_index, logic_id, version,
                          tv=snap.tv, store=store, out_seq=snap.out_seq,
                          last_input_ts=last_ts, ts_emit_index=emit_index)


def states_equal(a: PartitionState, b: PartitionState) -> bool:
    return snapshot(a).encode() == snapshot(b).encode()
