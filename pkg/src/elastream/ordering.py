"""Deterministic merge of several input streams into one total order.

Data events wait in a priority queue keyed by ``(ts, source, arrival index)``
and are released once every expected source has promised, via a watermark,
that nothing at or below their timestamp is still to come.  Commutative
consumers may skip the wait with :meth:`MergeBuffer.drain_relaxed`.

:class:`ChannelDemux` sits in front of a merge buffer when one logical
source can reach a consumer over several physical channels (the two
replicas of an operator during migration).  It folds the channels back
into a single monotone stream and drops the doubled outputs.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Hashable, Iterable

from .event_core import Event, SourceId, Timestamp, TimestampVector


class OrderingError(Exception):
    pass


class MonotonicityViolation(OrderingError):
    pass


class UnknownSource(OrderingError):
    pass


class StallDetected(OrderingError):
    pass


class MergeBuffer:
    def __init__(self, expected_sources: Iterable[SourceId], stall_limit: int | None = None):
        self.expected_sources = frozenset(expected_sources)
        self.watermarks: dict[SourceId, Timestamp] = {}
        self.last_data_ts: dict[SourceId, Timestamp] = {}
        self.released: tuple[Timestamp, SourceId, int] | None = None
        self.stall_limit = stall_limit
        self.idle_drains = 0
        self._heap: list[tuple[Timestamp, SourceId, int, int, Event]] = []
        self._arrivals: dict[SourceId, itertools.count] = {}
        self._global_arrival = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def ingest(self, event: Event) -> MergeBuffer:
        source = event.source
        if source not in self.expected_sources:
            raise UnknownSource(f"source {source} is not an input of this buffer")
        if not event.is_data:
            if event.ts > self.watermarks.get(source, 0):
                self.watermarks[source] = event.ts
            return self
        floor = max(self.last_data_ts.get(source, 0), self.watermarks.get(source, 0))
        if source in self.last_data_ts or source in self.watermarks:
            if event.ts <= floor:
                raise MonotonicityViolation(
                    f"source {source}: ts {event.ts} not above {floor}"
                )
        self.last_data_ts[source] = event.ts
        arrival = next(self._arrivals.setdefault(source, itertools.count()))
        heapq.heappush(
            self._heap, (event.ts, source, arrival, next(self._global_arrival), event)
        )
        return self

    @property
    def low_watermark(self) -> Timestamp:
        if not self.expected_sources:
            return 0
        return min(self.watermarks.get(s, 0) for s in self.expected_sources)

    def drain(self) -> list[Event]:
        """Pop every buffered event at or below the low-watermark, in total order."""
        lw = self.low_watermark
        out = []
        while self._heap and self._heap[0][0] <= lw:
            ts, source, arrival, _, event = heapq.heappop(self._heap)
            self.released = (ts, source, arrival)
            out.append(event)
        self._note_progress(bool(out))
        return out

    def drain_relaxed(self) -> list[Event]:
        """Pop everything buffered in arrival order, ignoring watermarks."""
        entries = sorted(self._heap, key=lambda entry: entry[3])
        self._heap.clear()
        self.idle_drains = 0
        return [entry[4] for entry in entries]

    def _note_progress(self, released: bool) -> None:
        if released or not self._heap:
            self.idle_drains = 0
            return
        self.idle_drains += 1
        if self.stall_limit is not None and self.idle_drains > self.stall_limit:
            silent = sorted(s for s in self.expected_sources if s not in self.watermarks)
            raise StallDetected(
                f"{len(self._heap)} events held for {self.idle_drains} drains; "
                f"low-watermark {self.low_watermark}, sources without watermark: {silent}"
            )


def ingest(buf: MergeBuffer, event: Event) -> MergeBuffer:
    return buf.ingest(event)


def drain(buf: MergeBuffer) -> list[Event]:
    return buf.drain()


def drain_relaxed(buf: MergeBuffer) -> list[Event]:
    return buf.drain_relaxed()


@dataclass
class _Channel:
    progress: Timestamp = 0


@dataclass
class _LogicalStream:
    channels: dict[Hashable, _Channel] = field(default_factory=dict)
    closed: set[Hashable] = field(default_factory=set)
    pending: dict[Timestamp, Event] = field(default_factory=dict)
    forwarded_wm: Timestamp = 0


class ChannelDemux:
    """Reassembles logical streams that arrive over several physical channels.

    Every channel is FIFO and monotone, and all channels of a logical source
    carry identical events for identical timestamps.  An event is released
    once no open channel can still deliver something older; copies at or
    below the released frontier are counted in ``duplicates`` and dropped.
    A channel counts as open from its first message, or from :meth:`expect`
    when the consumer already knows a producer will use it, until
    :meth:`close`.  Declaring the first producer of every stream up front
    keeps a late-joining channel from releasing events ahead of it.
    """

    def __init__(self) -> None:
        self.tv = TimestampVector()
        self.duplicates = 0
        self.duplicates_by_source: dict[SourceId, int] = {}
        self.mismatches = 0
        self._streams: dict[SourceId, _LogicalStream] = {}

    def offer(self, channel: Hashable, event: Event) -> list[Event]:
        stream = self._streams.setdefault(event.source, _LogicalStream())
        if channel in stream.closed:
            return []
        chan = stream.channels.setdefault(channel, _Channel())
        if event.is_data:
            held = stream.pending.get(event.ts)
            if self.tv.is_duplicate(event) or held is not None:
                self.duplicates += 1
                self.duplicates_by_source[event.source] = self.duplicates_by_source.get(event.source, 0) + 1
                if held is not None and held != event:
                    self.mismatches += 1
            else:
                stream.pending[event.ts] = event
        chan.progress = max(chan.progress, event.ts)
        return self._release(event.source, stream)

    def expect(self, channel: Hashable, source: SourceId) -> None:
        """Hold the stream back until ``channel`` has caught up; no-op if already known."""
        stream = self._streams.setdefault(source, _LogicalStream())
        if channel not in stream.closed:
            stream.channels.setdefault(channel, _Channel())

    def close(self, channel: Hashable, source: SourceId) -> list[Event]:
        stream = self._streams.setdefault(source, _LogicalStream())
        stream.channels.pop(channel, None)
        stream.closed.add(channel)
        return self._release(source, stream)

    def _release(self, source: SourceId, stream: _LogicalStream) -> list[Event]:
        if not stream.channels:
            return []
        frontier = min(c.progress for c in stream.channels.values())
        out = []
        for ts in sorted(t for t in stream.pending if t <= frontier):
            event = stream.pending.pop(ts)
            self.tv = self.tv.advance(source, ts)
            out.append(event)
        if frontier > stream.forwarded_wm:
            stream.forwarded_wm = frontier
            out.append(Event.watermark(source, frontier))
        return out
