import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualqa.unitizer import (
    IndexSpan,
    TimeSpan,
    UnitSequence,
    expand,
    index_to_time,
    merge_repeats,
    span_frames,
    time_to_index,
)


def brute_time_to_index(span, counts, period):
    """Scan every frame: collect dense indices of frames overlapping the span."""
    first = last = None
    frame = 0
    for i, c in enumerate(counts):
        for _ in range(c):
            lo, hi = frame * period, (frame + 1) * period
            # frame belongs to the span if its interval intersects [start, end)
            if hi > span.start + 1e-9 and lo < span.end - 1e-9:
                first = i if first is None else first
                last = i
            frame += 1
    return IndexSpan(first, last)


@pytest.mark.parametrize(
    "frames, units, counts",
    [
        ([], [], []),
        ([5, 5, 5, 2, 2, 9], [5, 2, 9], [3, 2, 1]),
        ([7, 7, 3, 7], [7, 3, 7], [2, 1, 1]),
    ],
)
def test_merge_repeats_examples(frames, units, counts):
    u = merge_repeats(frames)
    assert u.units.tolist() == units
    assert u.counts.tolist() == counts
    assert expand(u).tolist() == frames


def test_expand_example():
    u = UnitSequence([5, 2, 9], [3, 2, 1])
    assert expand(u).tolist() == [5, 5, 5, 2, 2, 9]


def test_roundtrip_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x = rng.integers(int(rng.integers(1, 6)), size=int(rng.integers(0, 60)))
        u = merge_repeats(x)
        assert np.array_equal(expand(u), x)
        if len(u) > 1:
            assert np.all(u.units[1:] != u.units[:-1])


@given(st.lists(st.integers(0, 4), max_size=200))
def test_merge_expand_identity(frames):
    u = merge_repeats(frames)
    assert expand(u).tolist() == frames
    assert u.n_frames == len(frames)


def test_unit_sequence_invariants():
    with pytest.raises(ValueError):
        UnitSequence([1, 1], [1, 2])
    with pytest.raises(ValueError):
        UnitSequence([1, 2], [0, 2])
    with pytest.raises(ValueError):
        UnitSequence([1, 2], [1])


def test_time_to_index_examples():
    u = UnitSequence([5, 2, 9], [3, 2, 1], 0.02)
    assert time_to_index(TimeSpan(0.06, 0.10), u) == IndexSpan(1, 1)
    assert time_to_index(TimeSpan(0.0, 0.12), u) == IndexSpan(0, 2)
    # end past the sequence is clamped
    assert time_to_index(TimeSpan(0.1, 0.5), u) == IndexSpan(2, 2)
    with pytest.raises(ValueError):
        time_to_index(TimeSpan(0.2, 0.3), u)


def test_index_to_time_examples():
    u = UnitSequence([5, 2, 9], [3, 2, 1], 0.02)
    s = index_to_time(IndexSpan(1, 1), u)
    assert (s.start, s.end) == pytest.approx((0.06, 0.10))
    s = index_to_time(IndexSpan(0, 2), u)
    assert (s.start, s.end) == pytest.approx((0.0, 0.12))
    with pytest.raises(IndexError):
        index_to_time(IndexSpan(1, 3), u)


def test_boundary_convention():
    # a span ending exactly on a frame boundary does not take the next frame
    assert span_frames(TimeSpan(0.04, 0.08), 0.02) == (2, 3)
    assert span_frames(TimeSpan(0.041, 0.081), 0.02) == (2, 4)


def test_time_to_index_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(500):
        counts = rng.integers(1, 6, size=int(rng.integers(1, 30)))
        units = np.arange(counts.size)
        u = UnitSequence(units, counts, 0.02)
        total = u.duration
        a, b = np.sort(rng.uniform(0, total, size=2))
        if b - a < 1e-6:
            continue
        span = TimeSpan(float(a), float(b))
        assert time_to_index(span, u) == brute_time_to_index(span, counts, 0.02)


def test_index_roundtrip_and_containment():
    rng = np.random.default_rng(2)
    for _ in range(500):
        counts = rng.integers(1, 8, size=int(rng.integers(1, 40)))
        u = UnitSequence(np.arange(counts.size), counts, 0.02)
        s, e = np.sort(rng.integers(0, counts.size, size=2))
        idx = IndexSpan(int(s), int(e))
        assert time_to_index(index_to_time(idx, u), u) == idx
        # snapping only widens
        a, b = np.sort(rng.uniform(0, u.duration, size=2))
        if b - a < 1e-6:
            continue
        span = TimeSpan(float(a), float(b))
        back = index_to_time(time_to_index(span, u), u)
        assert back.start <= span.start + 1e-9 and back.end >= span.end - 1e-9


@settings(max_examples=200)
@given(
    st.lists(st.integers(1, 9), min_size=1, max_size=40),
    st.sampled_from([0.01, 0.02, 0.025]),
    st.data(),
)
def test_index_roundtrip_property(counts, period, data):
    u = UnitSequence(np.arange(len(counts)), counts, period)
    s = data.draw(st.integers(0, len(counts) - 1))
    e = data.draw(st.integers(s, len(counts) - 1))
    assert time_to_index(index_to_time(IndexSpan(s, e), u), u) == IndexSpan(s, e)
