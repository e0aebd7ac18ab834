"""Smart-grid workload: a smart-plug load generator and the operators that consume it.

Loads are fixed-point hundredths of a watt held in integers, and every
average or median rounds half up, so replicas on any platform agree byte for
byte.
"""

from __future__ import annotations

import itertools
import math
import random
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

from .event_core import CLOSE_TS, Event, SourceId, Timestamp
from .operator_runtime import OperatorLogic, StateView, register_logic

READING = struct.Struct(">QQI")
FORECAST = struct.Struct(">QIQ")
ALARM = struct.Struct(">QIQ")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

DEFAULT_KEY_PREFIX = "plug-"


@dataclass(frozen=True)
class PlugReading:
    plug_id: int
    load: int  # hundredths of a watt
    slot: int

    def __post_init__(self) -> None:
        if self.load < 0:
            raise ValueError("load must be non-negative")

    def encode(self) -> bytes:
        return READING.pack(self.plug_id, self.load, self.slot)

    @classmethod
    def decode(cls, payload: bytes) -> PlugReading:
        return cls(*READING.unpack(payload))

    @property
    def watts(self) -> float:
        return self.load / 100


def round_div(num: int, den: int) -> int:
    """num/den rounded half up, for num >= 0 and den > 0."""
    return (2 * num + den) // (2 * den)


def mean_hundredths(values: Sequence[int]) -> int:
    return round_div(sum(values), len(values))


def median_hundredths(values: Sequence[int]) -> int:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return ordered[mid]
    return round_div(ordered[mid - 1] + ordered[mid], 2)


def _pack_ints(values: Iterable[int]) -> bytes:
    values = list(values)
    return _U32.pack(len(values)) + b"".join(_U64.pack(v) for v in values)


def _unpack_ints(data: bytes | None) -> list[int]:
    if not data:
        return []
    (n,) = _U32.unpack_from(data, 0)
    return [v for (v,) in struct.iter_unpack(">Q", data[4 : 4 + 8 * n])]


def plug_key(plug_id: int, prefix: str = DEFAULT_KEY_PREFIX) -> bytes:
    return f"{prefix}{plug_id}".encode()


@dataclass
class ForecastState:
    window: list[int] = field(default_factory=list)
    history: dict[int, list[int]] = field(default_factory=dict)


def forecast_step(state: ForecastState, reading: PlugReading, window: int = 4,
                  slots: int = 96) -> int | None:
    """Add one reading for a plug; on a completed window return the forecast in hundredths.

    The forecast is the mean of the window averaged with the median of past
    window means that ended in the same slot of the day.
    """
    state.window.append(reading.load)
    if len(state.window) < window:
        return None
    avg_now = mean_hundredths(state.window)
    state.window.clear()
    slot = reading.slot % slots
    past = state.history.setdefault(slot, [])
    hist = median_hundredths(past) if past else avg_now
    past.append(avg_now)
    return round_div(avg_now + hist, 2)


@dataclass
class AnomalyState:
    recent: list[int] = field(default_factory=list)
    excess: int = 0


def anomaly_step(state: AnomalyState, reading: PlugReading, k: Fraction | int = 3,
                 d: int = 5, m: int = 20) -> bool:
    """Track excess load for one plug; True when an alarm fires.

    A reading is excessive when it is above ``k`` times the mean of the
    previous ``m`` readings; ``d`` consecutive excessive readings raise one
    alarm and reset the count.
    """
    fired = False
    if len(state.recent) >= m:
        if reading.load * m > Fraction(k) * sum(state.recent[-m:]):
            state.excess += 1
        else:
            state.excess = 0
        if state.excess >= d:
            fired = True
            state.excess = 0
    state.recent.append(reading.load)
    del state.recent[:-m]
    return fired


@register_logic
class ForecastLogic(OperatorLogic):
    logic_id = "forecast"

    def __init__(self, params=None):
        super().__init__(params)
        self.window = int(self.params.get("window", 4))
        self.slots = int(self.params.get("slots", 96))
        if self.window < 1 or self.slots < 1:
            raise ValueError("window and slots must be positive")

    def apply(self, state: StateView, event: Event) -> list[tuple[bytes, bytes]]:
        reading = PlugReading.decode(event.payload)
        plug = _U64.pack(reading.plug_id)
        slot = reading.slot % self.slots
        win_key = b"w" + plug
        hist_key = b"h" + plug + _U32.pack(slot)
        fs = ForecastState(_unpack_ints(state.get(win_key)))
        past = _unpack_ints(state.get(hist_key))
        fs.history[slot] = past
        value = forecast_step(fs, reading, self.window, self.slots)
        state.put(win_key, _pack_ints(fs.window))
        if value is None:
            return []
        state.put(hist_key, _pack_ints(past))
        return [(event.key, FORECAST.pack(reading.plug_id, reading.slot, value))]


@register_logic
class AnomalyLogic(OperatorLogic):
    logic_id = "anomaly"

    def __init__(self, params=None):
        super().__init__(params)
        self.k = Fraction(self.params.get("k", "3"))
        self.d = int(self.params.get("d", 5))
        self.m = int(self.params.get("M", self.params.get("m", 20)))

    def apply(self, state: StateView, event: Event) -> list[tuple[bytes, bytes]]:
        reading = PlugReading.decode(event.payload)
        key = b"a" + _U64.pack(reading.plug_id)
        raw = state.get(key)
        st = AnomalyState()
        if raw:
            st.excess = _U32.unpack_from(raw, 0)[0]
            st.recent = _unpack_ints(raw[4:])
        fired = anomaly_step(st, reading, self.k, self.d, self.m)
        state.put(key, _U32.pack(st.excess) + _pack_ints(st.recent))
        if fired:
            return [(event.key, ALARM.pack(reading.plug_id, reading.slot, reading.load))]
        return []


@register_logic
class RunningSumLogic(OperatorLogic):
    """Per-plug total load; order-insensitive, so it may run on relaxed delivery."""

    logic_id = "running_sum"
    commutative = True

    def apply(self, state: StateView, event: Event) -> list[tuple[bytes, bytes]]:
        reading = PlugReading.decode(event.payload)
        key = b"s" + _U64.pack(reading.plug_id)
        raw = state.get(key)
        total = _U64.unpack(raw)[0] if raw else 0
        state.put(key, _U64.pack(total + reading.load))
        return []


@register_logic
class CounterLogic(OperatorLogic):
    logic_id = "counter"
    commutative = True

    def apply(self, state: StateView, event: Event) -> list[tuple[bytes, bytes]]:
        raw = state.get(b"count")
        count = _U64.unpack(raw)[0] if raw else 0
        state.put(b"count", _U64.pack(count + 1))
        return []


@register_logic
class WindowAverageLogic(OperatorLogic):
    """Tumbling mean over every ``window`` readings of the partition, payload in hundredths."""

    logic_id = "window_average"

    def apply(self, state: StateView, event: Event) -> list[tuple[bytes, bytes]]:
        window = int(self.params.get("window", 4))
        values = _unpack_ints(state.get(b"win"))
        values.append(PlugReading.decode(event.payload).load)
        if len(values) < window:
            state.put(b"win", _pack_ints(values))
            return []
        state.put(b"win", _pack_ints([]))
        return [(event.key, _U64.pack(mean_hundredths(values)))]


_instances = itertools.count()


@register_logic
class NondeterministicLogic(OperatorLogic):
    """Negative control: every instance stamps its own serial number on its outputs."""

    logic_id = "nondeterministic"

    def __init__(self, params=None):
        super().__init__(params)
        self.salt = next(_instances)

    def apply(self, state: StateView, event: Event) -> list[tuple[bytes, bytes]]:
        return [(event.key, _U64.pack(self.salt) + event.payload)]


@dataclass(frozen=True)
class AnomalyBurst:
    plug: int
    start: int  # reading index of the plug
    length: int
    factor: float


@dataclass(frozen=True)
class GeneratedEvent:
    step: int
    event: Event


def plug_source(plug: int, sources: int, first_source: SourceId = 1) -> SourceId:
    return first_source + plug % sources


def generate_plugs(seed: int, plugs: int, steps: int, anomalies: Iterable[AnomalyBurst] = (),
                   sources: int | None = None, *, slots: int = 96, watermark_every: int = 10,
                   noise: float = 0.1, diurnal: float = 0.3, first_source: SourceId = 1,
                   key_prefix: str = DEFAULT_KEY_PREFIX, close: bool = True) -> list[GeneratedEvent]:
    """Deterministic smart-plug stream: one reading per step, plugs in round robin.

    Plug ``p`` reports through source ``first_source + p % sources`` (one
    source per plug by default).  Reading ``i`` of a plug falls in slot
    ``i % slots``; its load is a per-plug mean shaped by a daily sinusoid,
    scaled by seeded uniform noise and by any matching anomaly burst.  Each
    source emits a watermark after every ``watermark_every`` readings and, when
    ``close`` is set, a closing watermark after the last step.
    """
    if plugs < 1:
        raise ValueError("plugs must be >= 1")
    if not 0 <= noise <= 1:
        raise ValueError("noise must be within [0, 1]")
    sources = plugs if sources is None else sources
    rng = random.Random(seed)
    means = [rng.uniform(50.0, 200.0) for _ in range(plugs)]
    phases = [rng.uniform(0, 2 * math.pi) for _ in range(plugs)]
    bursts = list(anomalies)
    reading_index = [0] * plugs
    per_source = {plug_source(p, sources, first_source): 0 for p in range(min(plugs, sources))}
    last_ts: dict[SourceId, Timestamp] = {}
    out: list[GeneratedEvent] = []
    for step in range(steps):
        plug = step % plugs
        idx = reading_index[plug]
        reading_index[plug] += 1
        slot = idx % slots
        base = means[plug] * (1 + diurnal * math.sin(2 * math.pi * slot / slots + phases[plug]))
        watts = base * (1 + rng.uniform(-noise, noise))
        for burst in bursts:
            if burst.plug == plug and burst.start <= idx < burst.start + burst.length:
                watts *= burst.factor
        load = max(0, round(watts * 100))
        source = plug_source(plug, sources, first_source)
        ts = step + 1
        payload = PlugReading(plug, load, slot).encode()
        out.append(GeneratedEvent(step, Event(source, ts, plug_key(plug, key_prefix), payload)))
        last_ts[source] = ts
        per_source[source] += 1
        if watermark_every and per_source[source] % watermark_every == 0:
            out.append(GeneratedEvent(step, Event.watermark(source, ts)))
    if close:
        for source in sorted(per_source):
            out.append(GeneratedEvent(steps, Event.watermark(source, CLOSE_TS)))
    return out


def stream_events(generated: Iterable[GeneratedEvent]) -> Iterator[Event]:
    return (g.event for g in generated)
