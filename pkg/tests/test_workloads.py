import statistics
import struct
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from elastream.event_core import CLOSE_TS
from elastream.harness.oracle import oracle_run
from elastream.harness.scenario import parse_scenario
from elastream.operator_runtime import OperatorDescriptor, PartitionState, process, state_hash
from elastream.workloads import (
    AnomalyBurst,
    AnomalyState,
    ForecastState,
    PlugReading,
    anomaly_step,
    forecast_step,
    generate_plugs,
    median_hundredths,
    round_div,
)


def test_reading_layout():
    raw = PlugReading(3, 12345, 7).encode()
    assert raw == (3).to_bytes(8, "big") + (12345).to_bytes(8, "big") + (7).to_bytes(4, "big")
    assert PlugReading.decode(raw) == PlugReading(3, 12345, 7)
    with pytest.raises(ValueError):
        PlugReading(1, -1, 0)


def test_round_half_up():
    assert round_div(5, 2) == 3
    assert round_div(4, 2) == 2
    assert round_div(7, 4) == 2
    assert median_hundredths([100, 301]) == 201


def feed_forecast(state, loads, slot=0):
    return [forecast_step(state, PlugReading(0, load, slot), window=4) for load in loads]


def test_forecast_empty_history():
    out = feed_forecast(ForecastState(), [200, 400, 600, 800])
    assert out[:3] == [None] * 3
    # avg 5.00, no history so the median defaults to the average
    assert out[3] == round((2 + 4 + 6 + 8) / 4 * 100) == 500


def test_forecast_with_history():
    state = ForecastState(history={0: [300]})
    assert feed_forecast(state, [200, 400, 600, 800])[3] == (500 + 300) // 2 == 400
    assert state.history[0] == [300, 500]


def test_forecast_incomplete_window():
    assert feed_forecast(ForecastState(), [100, 100, 100]) == [None, None, None]


def reference_alarms(loads, k=3, d=5, m=20):
    """Hand-written simulation with float means, independent of anomaly_step."""
    alarms, count = [], 0
    for i, load in enumerate(loads):
        if i >= m:
            mean = sum(loads[i - m : i]) / m
            count = count + 1 if load > k * mean else 0
            if count == d:
                alarms.append(i)
                count = 0
    return alarms


def run_anomaly(loads):
    state = AnomalyState()
    return [i for i, load in enumerate(loads) if anomaly_step(state, PlugReading(0, load, 0))]


def test_constant_load_never_alarms():
    assert run_anomaly([100] * 100) == []


def test_sustained_excess_alarms_once_on_fifth():
    loads = [100] * 20 + [1000] * 5
    assert run_anomaly(loads) == reference_alarms(loads) == [24]


def test_interrupted_excess_resets():
    loads = [100] * 20 + [1000] * 4 + [100] + [1000] * 4
    assert run_anomaly(loads) == reference_alarms(loads) == []


@given(st.lists(st.integers(0, 5000), max_size=80), st.integers(1, 4), st.integers(1, 6), st.integers(1, 8))
def test_anomaly_matches_reference(loads, k, d, m):
    state = AnomalyState()
    got = [i for i, load in enumerate(loads) if anomaly_step(state, PlugReading(0, load, 0), k, d, m)]
    assert got == reference_alarms(loads, k, d, m)


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=30))
def test_median_matches_statistics(values):
    expected = statistics.median(values)
    assert median_hundredths(values) == int(Fraction(expected) + Fraction(1, 2))


def test_generator_is_deterministic():
    a = generate_plugs(5, 4, 200, [AnomalyBurst(1, 3, 4, 5.0)])
    b = generate_plugs(5, 4, 200, [AnomalyBurst(1, 3, 4, 5.0)])
    assert [g.event.encode() for g in a] == [g.event.encode() for g in b]
    assert a != generate_plugs(6, 4, 200)


def test_two_plugs_two_monotone_sources():
    out = generate_plugs(1, 2, 60)
    sources = {g.event.source for g in out}
    assert sources == {1, 2}
    for s in sources:
        data = [g.event.ts for g in out if g.event.source == s and g.event.is_data]
        assert data == sorted(set(data))
        marks = [g.event.ts for g in out if g.event.source == s and not g.event.is_data]
        assert marks[-1] == CLOSE_TS
        assert len(marks) == 30 // 10 + 1


def test_watermarks_follow_every_tenth_reading():
    out = generate_plugs(2, 3, 90, sources=1)
    events = [g.event for g in out]
    for i, e in enumerate(events):
        if not e.is_data and e.ts != CLOSE_TS:
            assert events[i - 1].is_data and events[i - 1].ts == e.ts


def test_anomaly_burst_scales_load():
    plain = generate_plugs(4, 2, 40)
    burst = generate_plugs(4, 2, 40, [AnomalyBurst(0, 5, 2, 10.0)])
    load = lambda out, step: PlugReading.decode(next(g.event for g in out if g.step == step).payload).load
    # plug 0 reads on even steps; its readings 5 and 6 are steps 10 and 12
    assert abs(load(burst, 10) - 10 * load(plain, 10)) <= 10
    assert load(burst, 14) == load(plain, 14)


QUIET = """
name: quiet
seed: {seed}
steps: 2000
nodes: [1, 2]
workload:
  plugs: 8
  noise: 0.2
  sources: [{{id: 1, node: 1}}]
operators:
  - {{id: 1, name: anomaly, logic: anomaly, inputs: [sources], placement: [2]}}
sink: {{node: 2, inputs: [anomaly]}}
links: {{default: {{delay: 1}}}}
"""


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_no_anomalies_means_no_alarms(seed):
    assert oracle_run(parse_scenario(QUIET.format(seed=seed))).sink_log == []


def test_operator_logics_are_deterministic_folds():
    stream = [g.event for g in generate_plugs(8, 5, 400) if g.event.is_data]
    for logic_id in ("forecast", "anomaly", "running_sum", "window_average"):
        results = []
        for _ in range(2):
            op = OperatorDescriptor(1, logic_id, logic_id)
            logic = op.make_logic()
            state = PartitionState.fresh(1, 0, logic)
            out = [o.encode() for e in stream for o in process(state, e, logic)]
            results.append((out, state_hash(state)))
        assert results[0] == results[1]


def test_forecast_payload():
    op = OperatorDescriptor(1, "f", "forecast", params={"window": "2"})
    logic = op.make_logic()
    state = PartitionState.fresh(1, 0, logic)
    stream = [g.event for g in generate_plugs(3, 1, 4) if g.event.is_data]
    out = [o for e in stream for o in process(state, e, logic)]
    loads = [PlugReading.decode(e.payload).load for e in stream]
    plug, slot, value = struct.unpack(">QIQ", out[0].payload)
    assert (plug, slot) == (0, 1)
    assert value == round_div(loads[0] + loads[1], 2)
    # second window lands in a new slot with no history: forecast equals its own mean
    assert struct.unpack(">QIQ", out[1].payload)[2] == round_div(loads[2] + loads[3], 2)
