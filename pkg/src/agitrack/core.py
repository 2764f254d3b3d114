"""Shared domain types, time axis, and label algebra.

All timestamps are integer milliseconds since the UNIX epoch (UTC). Sample
rates are ``Fraction`` so index->time math stays exact over long sessions.
Every type here is immutable after construction and every operation is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

Timestamp = int  # milliseconds since epoch, UTC

RateLike = Union[Fraction, int, float, str]


class ValidationError(ValueError):
    """Raised when input data violates a documented contract."""


class Channel(str, Enum):
    ACC_X = "acc_x"
    ACC_Y = "acc_y"
    ACC_Z = "acc_z"
    ACC_MAG = "acc_mag"
    EDA = "eda"
    EDA_TONIC = "eda_tonic"
    EDA_PHASIC = "eda_phasic"
    TEMP = "temp"
    BVP = "bvp"
    HR = "hr"


class LabelClass(str, Enum):
    NORMAL = "normal"
    PRE_AGITATION = "pre_agitation"
    AGITATION = "agitation"


class LabelSource(str, Enum):
    NURSE_NOTE = "nurse_note"
    VIDEO_REVIEW = "video_review"
    MANUAL_PREAGITATION = "manual_preagitation"
    SYNTH_TRUTH = "synth_truth"


def as_rate(rate: RateLike) -> Fraction:
    """Coerce a rate to an exact positive Fraction (floats via ratio limit)."""
    if isinstance(rate, Fraction):
        out = rate
    elif isinstance(rate, int):
        out = Fraction(rate)
    elif isinstance(rate, str):
        out = Fraction(rate)
    else:
        out = Fraction(rate).limit_denominator(10**6)
    if out <= 0:
        raise ValidationError(f"rate must be positive, got {rate}")
    return out


@dataclass(frozen=True)
class SampleSeries:
    """Uniformly sampled raw channel with a per-sample validity mask.

    Sample ``i`` sits at ``start + 1000*i/rate_hz`` ms. Invalid samples mark
    gaps (e.g. off-wrist periods); their values are kept at 0.0 and must
    never be interpreted as physiology.
    """

    channel: Channel
    rate_hz: Fraction
    start: Timestamp
    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rate_hz", as_rate(self.rate_hz))
        values = np.asarray(self.values, dtype=np.float64)
        validity = np.asarray(self.validity, dtype=bool)
        if values.shape != validity.shape or values.ndim != 1:
            raise ValidationError(
                f"{self.channel}: values/validity must be equal-length 1-D arrays"
            )
        if self.start < 0:
            raise ValidationError("series start must be a non-negative timestamp")
        values.setflags(write=False)
        validity.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "validity", validity)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def step_ms(self) -> Fraction:
        return Fraction(1000, 1) / self.rate_hz

    def sample_time(self, i: int) -> Timestamp:
        return self.start + int(round(Fraction(1000 * i, 1) / self.rate_hz))

    def timestamps_ms(self) -> np.ndarray:
        step = 1000.0 / float(self.rate_hz)
        return (self.start + np.round(np.arange(len(self)) * step)).astype(np.int64)

    @property
    def end(self) -> Timestamp:
        """Exclusive end: time of the slot just past the last sample."""
        return self.sample_time(len(self))

    def index_range(self, start_ms: Timestamp, end_ms: Timestamp) -> Tuple[int, int]:
        """Half-open index range of samples with start_ms <= t < end_ms."""
        lo = Fraction(start_ms - self.start) * self.rate_hz / 1000
        hi = Fraction(end_ms - self.start) * self.rate_hz / 1000
        i0 = max(0, math.ceil(lo))
        i1 = min(len(self), math.ceil(hi))
        return i0, max(i0, i1)

    def slice_window(self, start_ms: Timestamp, end_ms: Timestamp) -> "SampleSeries":
        i0, i1 = self.index_range(start_ms, end_ms)
        return SampleSeries(
            channel=self.channel,
            rate_hz=self.rate_hz,
            start=self.sample_time(i0),
            values=self.values[i0:i1],
            validity=self.validity[i0:i1],
        )


def acc_magnitude(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.square(x) + np.square(y) + np.square(z))


@dataclass(frozen=True)
class LabelInterval:
    """Half-open [start, end) interval tagged with class and provenance."""

    start: Timestamp
    end: Timestamp
    klass: LabelClass
    source: LabelSource

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValidationError(
                f"interval start must precede end, got [{self.start}, {self.end})"
            )

    def overlap_ms(self, start_ms: Timestamp, end_ms: Timestamp) -> int:
        return max(0, min(self.end, end_ms) - max(self.start, start_ms))


@dataclass(frozen=True)
class SessionMeta:
    session_id: str
    participant_id: str
    t0: Timestamp
    duration_s: float

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValidationError("session duration must be positive")


@dataclass(frozen=True)
class WindowLabel:
    window_start: Timestamp
    window_len_s: float
    klass: LabelClass


def merge_intervals(
    intervals: Iterable[LabelInterval], gap_s: float = 0.0
) -> List[LabelInterval]:
    """Merge same-class, same-source intervals whose gap is < gap_s seconds.

    Output is sorted by start and non-overlapping within each
    (class, source) group. Idempotent.
    """
    if gap_s < 0:
        raise ValidationError("gap_s must be >= 0")
    gap_ms = gap_s * 1000.0
    groups: dict = {}
    for iv in intervals:
        groups.setdefault((iv.klass, iv.source), []).append(iv)
    out: List[LabelInterval] = []
    for (klass, source), ivs in groups.items():
        ivs.sort(key=lambda iv: (iv.start, iv.end))
        cur_start, cur_end = ivs[0].start, ivs[0].end
        for iv in ivs[1:]:
            if iv.start - cur_end < gap_ms:
                cur_end = max(cur_end, iv.end)
            else:
                out.append(LabelInterval(cur_start, cur_end, klass, source))
                cur_start, cur_end = iv.start, iv.end
        out.append(LabelInterval(cur_start, cur_end, klass, source))
    out.sort(key=lambda iv: (iv.start, iv.end, iv.klass.value, iv.source.value))
    return out


def normalize_intervals(intervals: Iterable[LabelInterval]) -> List[LabelInterval]:
    """Canonical form used on ingest: overlaps merged per (class, source)."""
    return merge_intervals(intervals, gap_s=0.0)


def _check_normalized(intervals: Sequence[LabelInterval]) -> None:
    seen: dict = {}
    for iv in sorted(intervals, key=lambda iv: iv.start):
        key = (iv.klass, iv.source)
        prev_end = seen.get(key)
        if prev_end is not None and iv.start < prev_end:
            raise ValidationError(
                f"overlapping {iv.klass.value}/{iv.source.value} intervals; "
                "normalize (merge) before labeling"
            )
        seen[key] = max(iv.end, prev_end or iv.end)


def _class_union(
    intervals: Sequence[LabelInterval], klass: LabelClass
) -> List[Tuple[int, int]]:
    spans = sorted((iv.start, iv.end) for iv in intervals if iv.klass == klass)
    merged: List[Tuple[int, int]] = []
    for s, e in spans:
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def _covered_ms(spans: Sequence[Tuple[int, int]], start: int, end: int) -> int:
    total = 0
    for s, e in spans:
        if s >= end:
            break
        total += max(0, min(e, end) - max(s, start))
    return total


def classify_window(
    intervals: Sequence[LabelInterval], start_ms: Timestamp, end_ms: Timestamp
) -> LabelClass:
    """50%-coverage rule: AGITATION wins, then PRE_AGITATION, else NORMAL.

    Coverage is measured against the union of the class's intervals across
    sources, so abutting notes from two sources count once.
    """
    win = end_ms - start_ms
    for klass in (LabelClass.AGITATION, LabelClass.PRE_AGITATION):
        spans = _class_union(intervals, klass)
        if 2 * _covered_ms(spans, start_ms, end_ms) >= win:
            return klass
    return LabelClass.NORMAL


def label_windows(
    intervals: Iterable[LabelInterval],
    window_len_s: float,
    stride_s: float,
    span: Tuple[Timestamp, Timestamp],
) -> List[WindowLabel]:
    """Label every stride-aligned window that fits fully inside span."""
    if window_len_s <= 0 or stride_s <= 0:
        raise ValidationError("window_len_s and stride_s must be positive")
    ivs = list(intervals)
    _check_normalized(ivs)
    span_start, span_end = span
    win_ms = int(round(window_len_s * 1000))
    stride_ms = int(round(stride_s * 1000))
    out: List[WindowLabel] = []
    agit = _class_union(ivs, LabelClass.AGITATION)
    pre = _class_union(ivs, LabelClass.PRE_AGITATION)
    start = span_start
    while start + win_ms <= span_end:
        end = start + win_ms
        if 2 * _covered_ms(agit, start, end) >= win_ms:
            klass = LabelClass.AGITATION
        elif 2 * _covered_ms(pre, start, end) >= win_ms:
            klass = LabelClass.PRE_AGITATION
        else:
            klass = LabelClass.NORMAL
        out.append(WindowLabel(start, window_len_s, klass))
        start += stride_ms
    return out
