"""Run-length merging of frame units and exact time <-> index span conversion.

Spans are half-open in time and closed in dense-unit indices. A time span
``(start, end)`` covers frames ``floor(start / period)`` through
``ceil(end / period) - 1``, so a span ending exactly on a frame boundary does
not pick up the following frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dualqa.validation import as_unit_ids

# relative slack when snapping t / period onto an integer frame boundary
_SNAP = 1e-6


@dataclass(frozen=True)
class TimeSpan:
    start: float
    end: float

    def __post_init__(self):
        if not (0 <= self.start < self.end) or not math.isfinite(self.end):
            raise ValueError(f"invalid TimeSpan({self.start}, {self.end})")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class IndexSpan:
    start_idx: int
    end_idx: int

    def __post_init__(self):
        if not (0 <= self.start_idx <= self.end_idx):
            raise ValueError(f"invalid IndexSpan({self.start_idx}, {self.end_idx})")


@dataclass(eq=False)
class UnitSequence:
    """Deduplicated unit ids with the run length of each."""

    units: np.ndarray
    counts: np.ndarray
    frame_period: float = 0.02

    def __post_init__(self):
        self.units = as_unit_ids(self.units)
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if self.units.shape != self.counts.shape:
            raise ValueError("units and counts differ in length")
        if self.counts.size and self.counts.min() < 1:
            raise ValueError("repetition counts must be >= 1")
        if self.units.size > 1 and np.any(self.units[1:] == self.units[:-1]):
            raise ValueError("adjacent units must differ")
        if not self.frame_period > 0:
            raise ValueError("frame_period must be positive")

    def __len__(self) -> int:
        return int(self.units.size)

    @property
    def n_frames(self) -> int:
        return int(self.counts.sum())

    @property
    def duration(self) -> float:
        return self.n_frames * self.frame_period

    def __eq__(self, other):
        if not isinstance(other, UnitSequence):
            return NotImplemented
        return (
            np.array_equal(self.units, other.units)
            and np.array_equal(self.counts, other.counts)
            and self.frame_period == other.frame_period
        )


def merge_repeats(frame_units: Sequence[int], frame_period: float = 0.02) -> UnitSequence:
    x = as_unit_ids(frame_units)
    if x.size == 0:
        return UnitSequence(x, np.zeros(0, dtype=np.int64), frame_period)
    starts = np.flatnonzero(np.r_[True, x[1:] != x[:-1]])
    counts = np.diff(np.r_[starts, x.size])
    return UnitSequence(x[starts], counts, frame_period)


def expand(u: UnitSequence) -> np.ndarray:
    return np.repeat(u.units, u.counts)


def _snap(q: float) -> float:
    r = round(q)
    return float(r) if abs(q - r) <= _SNAP * max(1.0, abs(q)) else q


def span_frames(span: TimeSpan, frame_period: float) -> tuple[int, int]:
    """Closed frame range ``(first, last)`` covered by a time span."""
    first = math.floor(_snap(span.start / frame_period))
    last = math.ceil(_snap(span.end / frame_period)) - 1
    return first, max(first, last)


def time_to_index(span: TimeSpan, u: UnitSequence) -> IndexSpan:
    n = u.n_frames
    f_s, f_e = span_frames(span, u.frame_period)
    if n == 0 or f_s >= n:
        raise ValueError(f"span {span} lies outside a sequence of {n} frames")
    f_e = min(f_e, n - 1)
    ends = np.cumsum(u.counts)
    s = int(np.searchsorted(ends, f_s, side="right"))
    e = int(np.searchsorted(ends, f_e, side="right"))
    return IndexSpan(s, e)


def index_to_time(idx: IndexSpan, u: UnitSequence) -> TimeSpan:
    if idx.end_idx >= len(u):
        raise IndexError(f"{idx} out of range for {len(u)} units")
    ends = np.cumsum(u.counts)
    first = int(ends[idx.start_idx] - u.counts[idx.start_idx])
    last = int(ends[idx.end_idx])
    return TimeSpan(first * u.frame_period, last * u.frame_period)
