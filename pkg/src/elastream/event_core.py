"""Events, logical timestamps and the timestamp-vector duplicate filter."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

SourceId = int
Timestamp = int

MAX_TIMESTAMP: Timestamp = (1 << 64) - 1
# a watermark at or above this value closes its stream
CLOSE_TS: Timestamp = (1 << 48) - 1

_HEAD = struct.Struct(">QQBI")
_LEN = struct.Struct(">I")


class EventDecodeError(ValueError):
    pass


class EventKind(enum.IntEnum):
    DATA = 0
    WATERMARK = 1


@dataclass(frozen=True, slots=True)
class Event:
    source: SourceId
    ts: Timestamp
    key: bytes = b""
    payload: bytes = b""
    kind: EventKind = EventKind.DATA

    @classmethod
    def watermark(cls, source: SourceId, ts: Timestamp) -> Event:
        return cls(source, ts, b"", b"", EventKind.WATERMARK)

    @property
    def is_data(self) -> bool:
        return self.kind is EventKind.DATA

    def encode(self) -> bytes:
        """Bit-exact binary form: source, ts, kind, then length-prefixed key and payload."""
        return b"".join(
            (
                _HEAD.pack(self.source, self.ts, int(self.kind), len(self.key)),
                self.key,
                _LEN.pack(len(self.payload)),
                self.payload,
            )
        )

    @classmethod
    def decode(cls, data: bytes) -> Event:
        event, end = cls.decode_from(data, 0)
        if end != len(data):
            raise EventDecodeError(f"{len(data) - end} trailing bytes after event")
        return event

    @classmethod
    def decode_from(cls, data: bytes, offset: int) -> tuple[Event, int]:
        try:
            source, ts, kind, key_len = _HEAD.unpack_from(data, offset)
            pos = offset + _HEAD.size
            key = bytes(data[pos : pos + key_len])
            pos += key_len
            (payload_len,) = _LEN.unpack_from(data, pos)
            pos += _LEN.size
            payload = bytes(data[pos : pos + payload_len])
            pos += payload_len
        except struct.error as exc:
            raise EventDecodeError(str(exc)) from exc
        if len(key) != key_len or len(payload) != payload_len:
            raise EventDecodeError("truncated event")
        try:
            event_kind = EventKind(kind)
        except ValueError as exc:
            raise EventDecodeError(f"unknown event kind {kind}") from exc
        return cls(source, ts, key, payload, event_kind), pos


@dataclass(frozen=True, slots=True)
class TimestampVector:
    """Per-source high-water marks of events already folded into a state.

    A source missing from ``entries`` reads as timestamp 0.
    """

    entries: Mapping[SourceId, Timestamp] = field(default_factory=dict)

    def get(self, source: SourceId) -> Timestamp:
        return self.entries.get(source, 0)

    def advance(self, source: SourceId, ts: Timestamp) -> TimestampVector:
        if ts <= self.get(source):
            return self
        updated = dict(self.entries)
        updated[source] = ts
        return TimestampVector(updated)

    def is_duplicate(self, event: Event) -> bool:
        return event.ts <= self.get(event.source)

    def merge(self, other: TimestampVector) -> TimestampVector:
        merged = dict(self.entries)
        for source, ts in other.entries.items():
            if ts > merged.get(source, 0):
                merged[source] = ts
        return TimestampVector(merged)

    def dominates(self, other: TimestampVector) -> bool:
        return all(self.get(s) >= ts for s, ts in other.entries.items())

    def items(self) -> Iterator[tuple[SourceId, Timestamp]]:
        return iter(sorted(self.entries.items()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimestampVector):
            return NotImplemented
        # zero entries are equivalent to absent ones
        mine = {s: t for s, t in self.entries.items() if t}
        theirs = {s: t for s, t in other.entries.items() if t}
        return mine == theirs

    def __hash__(self) -> int:
        return hash(tuple(sorted((s, t) for s, t in self.entries.items() if t)))

    def __repr__(self) -> str:
        inner = ", ".join(f"{s}:{t}" for s, t in self.items())
        return f"TimestampVector({{{inner}}})"

    @classmethod
    def of(cls, pairs: Mapping[SourceId, Timestamp] | Iterable[tuple[SourceId, Timestamp]]) -> TimestampVector:
        return cls(dict(pairs))


def advance(tv: TimestampVector, source: SourceId, ts: Timestamp) -> TimestampVector:
    return tv.advance(source, ts)


def is_duplicate(tv: TimestampVector, event: Event) -> bool:
    return tv.is_duplicate(event)


def merge_vectors(a: TimestampVector, b: TimestampVector) -> TimestampVector:
    return a.merge(b)


def encode_log(events: Iterable[Event]) -> bytes:
    """Output-log format: each event encoding prefixed by a 4-byte big-endian length."""
    parts = []
    for event in events:
        raw = event.encode()
        parts.append(_LEN.pack(len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_log(data: bytes) -> list[Event]:
    events = []
    pos = 0
    while pos < len(data):
        try:
            (size,) = _LEN.unpack_from(data, pos)
        except struct.error as exc:
            raise EventDecodeError(f"truncated length prefix at byte {pos}") from exc
        pos += _LEN.size
        chunk = data[pos : pos + size]
        if len(chunk) != size:
            raise EventDecodeError(f"truncated record at byte {pos}")
        events.append(Event.decode(chunk))
        pos += size
    return events
