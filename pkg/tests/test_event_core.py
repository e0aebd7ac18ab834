import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from elastream.event_core import (
    CLOSE_TS,
    MAX_TIMESTAMP,
    Event,
    EventDecodeError,
    EventKind,
    TimestampVector,
    advance,
    decode_log,
    encode_log,
    is_duplicate,
    merge_vectors,
)

TV = TimestampVector.of


def test_advance_examples():
    assert advance(TimestampVector(), 1, 5) == TV({1: 5})
    assert advance(TV({1: 5}), 1, 3) == TV({1: 5})
    assert advance(TV({1: 5, 2: 9}), 2, 12) == TV({1: 5, 2: 12})


def test_advance_returns_new_vector():
    tv = TV({1: 5})
    advanced = tv.advance(1, 8)
    assert tv.get(1) == 5 and advanced.get(1) == 8


def test_is_duplicate_examples():
    assert is_duplicate(TV({1: 10}), Event(1, 10))
    assert not is_duplicate(TV({1: 10}), Event(1, 11))
    assert not is_duplicate(TimestampVector(), Event(7, 1))


def test_merge_examples():
    assert merge_vectors(TV({1: 5}), TV({1: 3, 2: 7})) == TV({1: 5, 2: 7})
    assert merge_vectors(TimestampVector(), TimestampVector()) == TimestampVector()
    assert merge_vectors(TV({1: 2}), TV({1: 2})) == TV({1: 2})


def test_zero_entry_equals_absent():
    assert TV({1: 0, 2: 4}) == TV({2: 4})
    assert hash(TV({1: 0, 2: 4})) == hash(TV({2: 4}))


def test_dominates():
    assert TV({1: 5, 2: 3}).dominates(TV({1: 5}))
    assert not TV({1: 4}).dominates(TV({1: 5}))
    assert TV({}).dominates(TV({}))


def test_encoding_layout_is_bit_exact():
    event = Event(0x0102, 0x0A0B, b"ky", b"pay")
    expected = (
        (0x0102).to_bytes(8, "big") + (0x0A0B).to_bytes(8, "big") + b"\x00"
        + (2).to_bytes(4, "big") + b"ky" + (3).to_bytes(4, "big") + b"pay"
    )
    assert event.encode() == expected
    wm = Event.watermark(3, 9)
    assert wm.encode()[16] == 1 and wm.key == b"" and wm.payload == b""


def test_decode_rejects_garbage():
    with pytest.raises(EventDecodeError):
        Event.decode(b"\x00" * 5)
    good = Event(1, 2, b"k", b"v").encode()
    with pytest.raises(EventDecodeError):
        Event.decode(good + b"x")
    bad_kind = bytearray(good)
    bad_kind[16] = 9
    with pytest.raises(EventDecodeError):
        Event.decode(bytes(bad_kind))


def test_log_framing():
    events = [Event(1, 1, b"a", b"b"), Event.watermark(1, 4)]
    raw = encode_log(events)
    (first_len,) = struct.unpack_from(">I", raw, 0)
    assert first_len == len(events[0].encode())
    assert decode_log(raw) == events
    assert decode_log(b"") == []


def test_constants():
    assert MAX_TIMESTAMP == 2**64 - 1
    assert CLOSE_TS < MAX_TIMESTAMP


events = st.builds(
    Event,
    st.integers(0, MAX_TIMESTAMP),
    st.integers(0, MAX_TIMESTAMP),
    st.binary(max_size=40),
    st.binary(max_size=80),
    st.sampled_from(list(EventKind)),
)
vectors = st.dictionaries(st.integers(1, 6), st.integers(0, 1000), max_size=6).map(TimestampVector)


@given(events)
def test_encode_decode_roundtrip(event):
    assert Event.decode(event.encode()) == event


@given(vectors, st.lists(st.tuples(st.integers(1, 6), st.integers(0, 1000)), max_size=40))
def test_advance_is_monotone_and_dedup_sound(tv, steps):
    for source, ts in steps:
        before = dict(tv.entries)
        tv = tv.advance(source, ts)
        for s, t in before.items():
            assert tv.get(s) >= t
        for earlier in range(max(0, ts - 3), ts + 1):
            assert tv.is_duplicate(Event(source, earlier))


@given(vectors, vectors, vectors)
def test_merge_algebra(a, b, c):
    assert merge_vectors(a, b) == merge_vectors(b, a)
    assert merge_vectors(merge_vectors(a, b), c) == merge_vectors(a, merge_vectors(b, c))
    assert merge_vectors(a, a) == a
    merged = merge_vectors(a, b)
    assert merged.dominates(a) and merged.dominates(b)
