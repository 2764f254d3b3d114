"""Streaming detection engine: debounced per-modality event segmentation,
five-minute context buffers, modality fusion, alert emission, full-session
replay through the identical streaming path, and detection-latency metrics.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    LabelClass,
    LabelInterval,
    Timestamp,
    ValidationError,
)
from .ingest import Session
from . import pose as pose_mod
from . import wrist as wrist_mod


class Modality(str, Enum):
    WRIST = "wrist"
    VIDEO = "video"
    FUSED = "fused"


class EventStatus(str, Enum):
    OPEN = "open"
    CLOSED = "closed"
    CONFIRMED = "confirmed"
    REJECTED = "rejected"


class FusionMode(str, Enum):
    OR = "or"
    WRIST_ONLY = "wrist_only"
    VIDEO_ONLY = "video_only"


@dataclass
class DetectedEvent:
    event_id: str
    onset: Timestamp
    offset: Optional[Timestamp]
    record_start: Timestamp
    record_end: Optional[Timestamp]
    modality: Modality
    peak_score: float
    status: EventStatus
    evidence: List[Tuple[int, float]] = field(default_factory=list)
    truncated: bool = False

    def to_doc(self) -> dict:
        return {
            "event_id": self.event_id,
            "onset_ms": self.onset,
            "offset_ms": self.offset,
            "record_start_ms": self.record_start,
            "record_end_ms": self.record_end,
            "modality": self.modality.value,
            "peak_score": self.peak_score,
            "status": self.status.value,
            "evidence": [[int(t), float(s)] for t, s in self.evidence],
            "truncated": self.truncated,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "DetectedEvent":
        return cls(
            event_id=doc["event_id"],
            onset=int(doc["onset_ms"]),
            offset=None if doc.get("offset_ms") is None else int(doc["offset_ms"]),
            record_start=int(doc["record_start_ms"]),
            record_end=(
                None if doc.get("record_end_ms") is None else int(doc["record_end_ms"])
            ),
            modality=Modality(doc["modality"]),
            peak_score=float(doc["peak_score"]),
            status=EventStatus(doc["status"]),
            evidence=[(int(t), float(s)) for t, s in doc.get("evidence", [])],
            truncated=bool(doc.get("truncated", False)),
        )


def _default_window_lens() -> Dict[Modality, float]:
    return {Modality.WRIST: 60.0, Modality.VIDEO: 30.0}


@dataclass
class EngineConfig:
    threshold: float = 0.5
    k_on: int = 3
    k_off: int = 5
    buffer_s: float = 300.0
    merge_gap_s: float = 60.0
    fusion: FusionMode = FusionMode.OR
    window_len_s: Dict[Modality, float] = field(default_factory=_default_window_lens)

    def __post_init__(self) -> None:
        if self.k_on < 1 or self.k_off < 1:
            raise ValidationError("k_on and k_off must be >= 1")
        if self.buffer_s < 0:
            raise ValidationError("buffer_s must be >= 0")


@dataclass
class _ModalityState:
    pos_run: int = 0
    neg_run: int = 0
    pending: List[Tuple[int, float]] = field(default_factory=list)
    open_event: Optional[DetectedEvent] = None
    last_pos_end: Optional[int] = None
    last_t: Optional[int] = None
    counter: int = 0


class StreamEngine:
    """Per-modality run-length state machine over window scores.

    An event opens at the first window of a run of k_on scores above
    threshold (alert fires exactly once, at open) and closes after k_off
    consecutive non-positive scores, with offset at the last positive
    window's end. Scores must arrive time-monotone per modality.
    """

    def __init__(
        self,
        config: Optional[EngineConfig] = None,
        session_start: Timestamp = 0,
        session_end: Optional[Timestamp] = None,
        alert_sink: Optional[Callable[[DetectedEvent], None]] = None,
    ) -> None:
        self.config = config or EngineConfig()
        self.session_start = session_start
        self.session_end = session_end
        self.alert_sink = alert_sink
        self._states: Dict[Modality, _ModalityState] = {
            Modality.WRIST: _ModalityState(),
            Modality.VIDEO: _ModalityState(),
        }
        self._events: List[DetectedEvent] = []
        self._alerts: List[DetectedEvent] = []
        self._lock = threading.Lock()

    # -- helpers -------------------------------------------------------------

    def _window_ms(self, modality: Modality) -> int:
        return int(round(self.config.window_len_s.get(modality, 60.0) * 1000))

    def _clamp_start(self, t: int) -> int:
        return max(self.session_start, t)

    def _clamp_end(self, t: int) -> int:
        return t if self.session_end is None else min(self.session_end, t)

    def _open_event(self, state: _ModalityState, modality: Modality) -> DetectedEvent:
        onset = state.pending[0][0]
        state.counter += 1
        event = DetectedEvent(
            event_id=f"{modality.value}-{state.counter:04d}",
            onset=onset,
            offset=None,
            record_start=self._clamp_start(onset - int(self.config.buffer_s * 1000)),
            record_end=None,
            modality=modality,
            peak_score=max(s for _, s in state.pending),
            status=EventStatus.OPEN,
            evidence=list(state.pending),
        )
        state.open_event = event
        self._events.append(event)
        self._alerts.append(event)
        if self.alert_sink is not None:
            self.alert_sink(event)
        return event

    def _close_event(self, state: _ModalityState, offset: int, truncated: bool) -> DetectedEvent:
        event = state.open_event
        assert event is not None
        event.offset = offset
        event.record_end = self._clamp_end(offset + int(self.config.buffer_s * 1000))
        event.status = EventStatus.CLOSED
        event.truncated = truncated
        state.open_event = None
        state.pos_run = 0
        state.neg_run = 0
        state.pending = []
        state.last_pos_end = None
        return event

    # -- streaming surface -----------------------------------------------------

    def push_window_score(
        self, t: Timestamp, score: float, modality: Modality
    ) -> Dict[str, List[DetectedEvent]]:
        """Feed one window score; returns events opened/closed and alerts
        emitted by this step."""
        modality = Modality(modality)
        if modality == Modality.FUSED:
            raise ValidationError("fused scores are derived, not pushed")
        state = self._states[modality]
        if state.last_t is not None and t <= state.last_t:
            raise ValidationError(
                f"{modality.value}: non-monotone score timestamp {t} after {state.last_t}"
            )
        opened: List[DetectedEvent] = []
        closed: List[DetectedEvent] = []
        alerts: List[DetectedEvent] = []
        state.last_t = t
        positive = score > self.config.threshold
        if state.open_event is not None:
            state.open_event.evidence.append((t, score))
            if positive:
                state.open_event.peak_score = max(state.open_event.peak_score, score)
                state.last_pos_end = t + self._window_ms(modality)
                state.neg_run = 0
            else:
                state.neg_run += 1
                if state.neg_run >= self.config.k_off:
                    closed.append(self._close_event(state, state.last_pos_end, False))
        else:
            if positive:
                state.pending.append((t, score))
                state.pos_run += 1
                state.last_pos_end = t + self._window_ms(modality)
                if state.pos_run >= self.config.k_on:
                    event = self._open_event(state, modality)
                    opened.append(event)
                    alerts.append(event)
            else:
                state.pos_run = 0
                state.pending = []
                state.last_pos_end = None
        return {"opened": opened, "closed": closed, "alerts": alerts}

    def finish(self) -> List[DetectedEvent]:
        """Close ongoing events at stream end (flagged truncated)."""
        closed = []
        for state in self._states.values():
            if state.open_event is not None:
                last_t = state.last_t if state.last_t is not None else state.open_event.onset
                offset = last_t if last_t > state.open_event.onset else state.last_pos_end
                closed.append(self._close_event(state, offset, True))
        return closed

    def events(self, modality: Optional[Modality] = None) -> List[DetectedEvent]:
        out = self._events if modality is None else [
            e for e in self._events if e.modality == modality
        ]
        return list(out)

    def alerts(self) -> List[DetectedEvent]:
        return list(self._alerts)


def fuse_events(
    events: Sequence[DetectedEvent],
    config: EngineConfig,
    session_start: Timestamp = 0,
    session_end: Optional[Timestamp] = None,
) -> List[DetectedEvent]:
    """Merge closed per-modality events into FUSED events.

    Under OR fusion, events whose spans come within merge_gap_s of each
    other share one fused event; video events own the fused boundaries when
    present, since the video pipeline pins start/end times best.
    """
    if config.fusion == FusionMode.WRIST_ONLY:
        pool = [e for e in events if e.modality == Modality.WRIST]
    elif config.fusion == FusionMode.VIDEO_ONLY:
        pool = [e for e in events if e.modality == Modality.VIDEO]
    else:
        pool = [e for e in events if e.modality in (Modality.WRIST, Modality.VIDEO)]
    pool = [e for e in pool if e.offset is not None]
    pool.sort(key=lambda e: (e.onset, e.offset))
    gap_ms = int(config.merge_gap_s * 1000)
    groups: List[List[DetectedEvent]] = []
    group_end: Optional[int] = None
    for event in pool:
        if groups and event.onset - group_end < gap_ms:
            groups[-1].append(event)
            group_end = max(group_end, event.offset)
        else:
            groups.append([event])
            group_end = event.offset
    fused: List[DetectedEvent] = []
    buffer_ms = int(config.buffer_s * 1000)
    for i, group in enumerate(groups, start=1):
        video = [e for e in group if e.modality == Modality.VIDEO]
        boundary_src = video if video else group
        onset = min(e.onset for e in boundary_src)
        offset = max(e.offset for e in boundary_src)
        evidence = sorted(
            (pair for e in group for pair in e.evidence), key=lambda p: p[0]
        )
        record_end = offset + buffer_ms
        if session_end is not None:
            record_end = min(record_end, session_end)
        fused.append(
            DetectedEvent(
                event_id=f"fused-{i:04d}",
                onset=onset,
                offset=offset,
                record_start=max(session_start, onset - buffer_ms),
                record_end=record_end,
                modality=Modality.FUSED,
                peak_score=max(e.peak_score for e in group),
                status=EventStatus.CLOSED,
                evidence=evidence,
                truncated=any(e.truncated for e in group),
            )
        )
    return fused


def run_replay(
    session: Session,
    wrist_model=None,
    video_model=None,
    config: Optional[EngineConfig] = None,
    step_hz: float = 5.0,
    person_id: Optional[str] = None,
    alert_sink: Optional[Callable[[DetectedEvent], None]] = None,
    score_sink: Optional[Callable[[int, float, Modality], None]] = None,
) -> List[DetectedEvent]:
    """Replay a recorded session through the same streaming path used live.

    Window scores from both modalities are pushed in global time order, one
    at a time; output contains the per-modality events plus the fused view.
    """
    config = config or EngineConfig()
    t0 = session.meta.t0
    t_end = session.end()
    scores: List[Tuple[int, float, Modality]] = []

    if wrist_model is not None:
        prepared = wrist_mod.prepare_catalog_channels(session.series)
        expected = tuple(wrist_mod.catalog_names())
        if tuple(wrist_model.schema_) != expected:
            raise ValidationError("wrist model schema does not match the feature catalog")
        win_ms = int(round(config.window_len_s.get(Modality.WRIST, 60.0) * 1000))
        start = t0
        while start + win_ms <= t_end:
            fv = wrist_mod.extract_window_features(prepared, start, win_ms / 1000.0)
            if fv.usable:
                scores.append(
                    (start, wrist_model.score_row(fv.values), Modality.WRIST)
                )
            start += win_ms

    if video_model is not None and session.keypoints:
        rows = pose_mod.extract_feature_rows(session.keypoints, person_id=person_id)
        all_names = list(pose_mod.POSE_FEATURE_NAMES)
        try:
            cols = [all_names.index(n) for n in video_model.schema_]
        except ValueError as exc:
            raise ValidationError(f"video model schema mismatch: {exc}") from None
        win_s = config.window_len_s.get(Modality.VIDEO, 30.0)
        sequences = pose_mod.build_sequences(
            rows, [], window_s=win_s, stride_s=1.0, step_hz=step_hz
        )
        if sequences and video_model.seq_len_ != sequences[0].steps.shape[0]:
            raise ValidationError(
                f"video model expects sequence length {video_model.seq_len_}, "
                f"pipeline produced {sequences[0].steps.shape[0]}"
            )
        if sequences:
            stacked = np.stack([s.steps[:, cols] for s in sequences])
            probs = video_model.predict_proba(stacked)[:, 1]
            for seq, p in zip(sequences, probs):
                scores.append((seq.window_start, float(p), Modality.VIDEO))

    scores.sort(key=lambda rec: (rec[0], rec[2].value))
    engine = StreamEngine(
        config, session_start=t0, session_end=t_end, alert_sink=alert_sink
    )
    for t, score, modality in scores:
        engine.push_window_score(t, score, modality)
        if score_sink is not None:
            score_sink(t, score, modality)
    engine.finish()
    events = engine.events()
    events.extend(fuse_events(events, config, session_start=t0, session_end=t_end))
    return events


@dataclass
class LatencyMetrics:
    median_latency_s: Optional[float]
    recall_at_event_level: float
    false_events_per_hour: float
    n_truth: int
    n_events: int

    def to_doc(self) -> dict:
        return {
            "median_latency_s": self.median_latency_s,
            "recall_at_event_level": self.recall_at_event_level,
            "false_events_per_hour": self.false_events_per_hour,
            "n_truth": self.n_truth,
            "n_events": self.n_events,
        }


def detection_latency(
    events: Sequence[DetectedEvent],
    truth: Sequence[LabelInterval],
    span: Optional[Tuple[Timestamp, Timestamp]] = None,
    tolerance_s: float = 60.0,
) -> LatencyMetrics:
    """Event-level recall, onset latency, and false-event rate.

    A truth interval counts as detected when some event onset falls in
    [start - tolerance, end]; latency (possibly negative for pre-emptive
    detections) uses the earliest qualifying onset. An event with no overlap
    with any tolerance-padded truth interval is false.
    """
    tol_ms = int(tolerance_s * 1000)
    truth = [iv for iv in truth if iv.klass == LabelClass.AGITATION]
    latencies: List[float] = []
    detected = 0
    for iv in truth:
        onsets = [e.onset for e in events if iv.start - tol_ms <= e.onset <= iv.end]
        if onsets:
            detected += 1
            latencies.append((min(onsets) - iv.start) / 1000.0)
    false_events = 0
    for e in events:
        end = e.offset if e.offset is not None else e.onset
        hit = any(
            min(end, iv.end + tol_ms) - max(e.onset, iv.start - tol_ms) > 0
            for iv in truth
        )
        false_events += int(not hit)
    if span is not None:
        span_ms = span[1] - span[0]
    else:
        points = [iv.end for iv in truth] + [
            (e.offset if e.offset is not None else e.onset) for e in events
        ]
        starts = [iv.start for iv in truth] + [e.onset for e in events]
        span_ms = (max(points) - min(starts)) if points else 0
    hours = span_ms / 3_600_000.0
    return LatencyMetrics(
        median_latency_s=float(np.median(latencies)) if latencies else None,
        recall_at_event_level=detected / len(truth) if truth else 1.0,
        false_events_per_hour=false_events / hours if hours > 0 else 0.0,
        n_truth=len(truth),
        n_events=len(events),
    )


@dataclass
class PreAgitationFlag:
    t: Timestamp
    reason: str
    value: float


class PreAgitationDetector:
    """Reference ramp detector on minute biomarkers: flags when activity
    counts exceed a threshold or pulse rate rises sharply versus its recent
    baseline (trailing-median comparison, a windowed slope)."""

    def __init__(
        self,
        counts_threshold: int = 30,
        hr_rise_bpm: float = 9.0,
        baseline_window_min: int = 8,
        baseline_lag_min: int = 3,
    ) -> None:
        self.counts_threshold = counts_threshold
        self.hr_rise_bpm = hr_rise_bpm
        self.baseline_window_min = baseline_window_min
        self.baseline_lag_min = baseline_lag_min

    def flags(self, records: Sequence) -> List[PreAgitationFlag]:
        out: List[PreAgitationFlag] = []
        hr_series: List[Tuple[int, float]] = [
            (r.t, r.pulse_rate_bpm) for r in records if r.pulse_rate_bpm is not None
        ]
        hr_by_t = dict(hr_series)
        hr_ts = [t for t, _ in hr_series]
        for rec in records:
            if (
                rec.activity_counts is not None
                and rec.activity_counts >= self.counts_threshold
            ):
                out.append(
                    PreAgitationFlag(rec.t, "activity_counts", float(rec.activity_counts))
                )
                continue
            if rec.pulse_rate_bpm is None:
                continue
            lo = rec.t - (self.baseline_lag_min + self.baseline_window_min) * 60_000
            hi = rec.t - self.baseline_lag_min * 60_000
            baseline = [hr_by_t[t] for t in hr_ts if lo <= t < hi]
            if len(baseline) < 3:
                continue
            rise = rec.pulse_rate_bpm - float(np.median(baseline))
            if rise >= self.hr_rise_bpm:
                out.append(PreAgitationFlag(rec.t, "hr_rise", rise))
        return out

    def lead_times_s(
        self, records: Sequence, truth: Sequence[LabelInterval]
    ) -> List[float]:
        """Per agitation episode: seconds between the earliest flag inside
        the pre-agitation window and the agitation onset (0 when unflagged)."""
        flags = self.flags(records)
        leads: List[float] = []
        pre = [iv for iv in truth if iv.klass == LabelClass.PRE_AGITATION]
        for iv in truth:
            if iv.klass != LabelClass.AGITATION:
                continue
            lead_window = next(
                (p for p in pre if p.end == iv.start), None
            )
            window_start = lead_window.start if lead_window else iv.start - 360_000
            hits = [f.t for f in flags if window_start <= f.t < iv.start]
            leads.append((iv.start - min(hits)) / 1000.0 if hits else 0.0)
        return leads
