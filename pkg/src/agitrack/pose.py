"""Skeletal keypoint features: frame normalization, per-step motion/geometry
features (displacements, neck distances, torso-normalized reference values,
angles), sliding-window sequence building, and per-class correlation pruning.

Keypoint layout is the 18-point COCO-style skeleton with the neck at index 1
and hips at 8 (right) / 11 (left). Feature indices 1..14 map to skeleton
indices through ``index_map`` (identity by default).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import (
    LabelInterval,
    LabelClass,
    Timestamp,
    ValidationError,
    as_rate,
    classify_window,
)
from .ingest import KeypointFrame, N_KEYPOINTS

NECK = 1
RIGHT_HIP = 8
LEFT_HIP = 11
CONFIDENCE_FLOOR = 0.1

BODY_INDICES = tuple(range(1, 15))  # feature indices 1..14

POSE_FEATURE_NAMES: Tuple[str, ...] = (
    tuple(f"eu_{i}" for i in BODY_INDICES)
    + tuple(f"eu_1_{j}" for j in range(3, 15))
    + tuple(f"por_{j}_1" for j in range(2, 15))
    + tuple(f"ang_1_{j}" for j in range(2, 15))
)
N_POSE_FEATURES = len(POSE_FEATURE_NAMES)  # 14 + 12 + 13 + 13 = 52


@dataclass(frozen=True)
class NormalizedFrame:
    """Skeleton translated to the neck and scaled by neck-to-mid-hip length.

    ``carried`` marks points filled from history rather than observed;
    ``seen`` marks points observed at least once on this track. Raw anchor
    pixels ride along so the next frame can normalize even when its own
    anchors drop out.
    """

    t: Timestamp
    person_id: str
    points: np.ndarray  # (18, 2) normalized
    carried: np.ndarray  # (18,) bool
    seen: np.ndarray  # (18,) bool
    valid: bool
    raw_neck: Optional[np.ndarray]
    raw_right_hip: Optional[np.ndarray]
    raw_left_hip: Optional[np.ndarray]


def _invalid_frame(frame: KeypointFrame, prev: Optional[NormalizedFrame]) -> NormalizedFrame:
    points = prev.points if prev is not None else np.zeros((N_KEYPOINTS, 2))
    seen = prev.seen if prev is not None else np.zeros(N_KEYPOINTS, dtype=bool)
    return NormalizedFrame(
        t=frame.t,
        person_id=frame.person_id,
        points=points,
        carried=np.ones(N_KEYPOINTS, dtype=bool),
        seen=seen,
        valid=False,
        raw_neck=prev.raw_neck if prev is not None else None,
        raw_right_hip=prev.raw_right_hip if prev is not None else None,
        raw_left_hip=prev.raw_left_hip if prev is not None else None,
    )


def normalize_skeleton(
    frame: KeypointFrame, prev: Optional[NormalizedFrame] = None
) -> NormalizedFrame:
    """Translate to the neck, scale by neck-to-mid-hip distance.

    Low-confidence points are carried forward from the last valid normalized
    position; anchors (neck/hips) carry forward in raw pixels. The frame is
    invalid only when the neck, or both hips, are unrecoverable.
    """
    pts = frame.points[:, :2]
    conf_ok = frame.points[:, 2] >= CONFIDENCE_FLOOR

    neck = pts[NECK] if conf_ok[NECK] else (prev.raw_neck if prev else None)
    rhip = pts[RIGHT_HIP] if conf_ok[RIGHT_HIP] else (prev.raw_right_hip if prev else None)
    lhip = pts[LEFT_HIP] if conf_ok[LEFT_HIP] else (prev.raw_left_hip if prev else None)
    if neck is None or (rhip is None and lhip is None):
        return _invalid_frame(frame, prev)
    hips = [p for p in (rhip, lhip) if p is not None]
    mid_hip = np.mean(hips, axis=0)
    scale = float(np.linalg.norm(np.asarray(neck) - mid_hip))
    if scale <= 0.0:
        return _invalid_frame(frame, prev)

    points = np.zeros((N_KEYPOINTS, 2))
    carried = np.zeros(N_KEYPOINTS, dtype=bool)
    seen = prev.seen.copy() if prev is not None else np.zeros(N_KEYPOINTS, dtype=bool)
    for i in range(N_KEYPOINTS):
        if conf_ok[i]:
            points[i] = (pts[i] - neck) / scale
            seen[i] = True
        elif prev is not None and prev.seen[i]:
            points[i] = prev.points[i]
            carried[i] = True
        else:
            carried[i] = True
    # anchors recovered from raw carry-forward still count as carried
    if not conf_ok[NECK]:
        points[NECK] = 0.0
        carried[NECK] = True
        seen[NECK] = True
    for idx, raw in ((RIGHT_HIP, rhip), (LEFT_HIP, lhip)):
        if not conf_ok[idx] and raw is not None:
            points[idx] = (np.asarray(raw) - neck) / scale
            carried[idx] = True
            seen[idx] = True
    return NormalizedFrame(
        t=frame.t,
        person_id=frame.person_id,
        points=points,
        carried=carried,
        seen=seen,
        valid=True,
        raw_neck=np.asarray(neck, dtype=np.float64),
        raw_right_hip=None if rhip is None else np.asarray(rhip, dtype=np.float64),
        raw_left_hip=None if lhip is None else np.asarray(lhip, dtype=np.float64),
    )


@dataclass(frozen=True)
class PoseFeatureRow:
    t: Timestamp
    values: np.ndarray  # (52,) in POSE_FEATURE_NAMES order
    valid: bool

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (N_POSE_FEATURES,):
            raise ValidationError(f"pose feature row must have {N_POSE_FEATURES} values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def extract_pose_features(
    curr: NormalizedFrame,
    prev: Optional[NormalizedFrame],
    index_map: Optional[Dict[int, int]] = None,
) -> PoseFeatureRow:
    """One feature row from a consecutive pair of normalized frames.

    eu_i: displacement of point i between frames; eu_1_j: distance from the
    neck to point j; por_j_1: the same distance over the torso length (1 in
    normalized units when hips are observed); ang_1_j: angle of the neck->j
    vector versus image-down vertical, atan2(dx, dy) in [-pi, pi].
    """
    if not curr.valid or prev is None or not prev.valid:
        return PoseFeatureRow(curr.t, np.zeros(N_POSE_FEATURES), valid=False)
    imap = index_map or {}

    def loc(frame: NormalizedFrame, i: int) -> np.ndarray:
        return frame.points[imap.get(i, i)]

    def was_carried(frame: NormalizedFrame, i: int) -> bool:
        return bool(frame.carried[imap.get(i, i)])

    values = np.zeros(N_POSE_FEATURES)
    k = 0
    for i in BODY_INDICES:
        if was_carried(curr, i) or was_carried(prev, i):
            values[k] = 0.0
        else:
            values[k] = float(np.linalg.norm(loc(curr, i) - loc(prev, i)))
        k += 1
    origin = loc(curr, 1)
    for j in range(3, 15):
        values[k] = float(np.linalg.norm(loc(curr, j) - origin))
        k += 1
    mid_hip = 0.5 * (curr.points[imap.get(8, RIGHT_HIP)] + curr.points[imap.get(11, LEFT_HIP)])
    torso = float(np.linalg.norm(origin - mid_hip))
    for j in range(2, 15):
        d = float(np.linalg.norm(loc(curr, j) - origin))
        values[k] = d / torso if torso > 0.0 else 0.0
        k += 1
    for j in range(2, 15):
        delta = loc(curr, j) - origin
        values[k] = float(np.arctan2(delta[0], delta[1]))
        k += 1
    return PoseFeatureRow(curr.t, values, valid=True)


def normalize_track(
    frames: Sequence[KeypointFrame], person_id: Optional[str] = None
) -> List[NormalizedFrame]:
    """Normalize one person's frames in time order with carry-forward state."""
    out: List[NormalizedFrame] = []
    prev: Optional[NormalizedFrame] = None
    for frame in frames:
        if person_id is not None and frame.person_id != person_id:
            continue
        norm = normalize_skeleton(frame, prev)
        out.append(norm)
        prev = norm
    return out


def extract_feature_rows(
    frames: Sequence[KeypointFrame],
    person_id: Optional[str] = None,
    index_map: Optional[Dict[int, int]] = None,
) -> List[PoseFeatureRow]:
    if person_id is None:
        people = sorted({f.person_id for f in frames})
        if len(people) > 1:
            raise ValidationError(
                "multi-person keypoint stream: select one person_id from "
                + ", ".join(people)
            )
    track = normalize_track(frames, person_id)
    rows: List[PoseFeatureRow] = []
    prev: Optional[NormalizedFrame] = None
    for norm in track:
        rows.append(extract_pose_features(norm, prev, index_map))
        prev = norm
    return rows


@dataclass(frozen=True)
class FeatureSequence:
    window_start: Timestamp
    steps: np.ndarray  # (L, n_features)
    label: int
    person_id: str = ""
    participant_id: str = ""


def build_sequences(
    rows: Sequence[PoseFeatureRow],
    labels: Sequence[LabelInterval],
    window_s: float = 30.0,
    stride_s: float = 1.0,
    step_hz: float = 5.0,
    max_invalid_fraction: float = 0.2,
    person_id: str = "",
    participant_id: str = "",
) -> List[FeatureSequence]:
    """Sliding fixed-length sequences over per-step feature rows.

    Rows are subsampled onto the step grid first; each sequence takes
    ``window_s * step_hz`` consecutive steps, is labeled positive when the
    window is AGITATION under the 50%-coverage rule, and is discarded when
    more than ``max_invalid_fraction`` of its steps are invalid.
    """
    step_rate = as_rate(step_hz)
    L = int(round(window_s * float(step_rate)))
    if L < 1:
        raise ValidationError("window too short for the step rate")
    if len(rows) < 2:
        return []
    ts = np.asarray([r.t for r in rows], dtype=np.int64)
    if np.any(np.diff(ts) <= 0):
        raise ValidationError("pose feature rows must be time-sorted")
    src_step_ms = float(np.median(np.diff(ts)))
    tgt_step_ms = 1000.0 / float(step_rate)
    if tgt_step_ms < src_step_ms * (1.0 - 1e-6):
        raise ValidationError("step_hz exceeds the source frame rate")

    grid = np.arange(ts[0], ts[-1] + 1e-9, tgt_step_ms)
    right = np.clip(np.searchsorted(ts, grid), 0, len(ts) - 1)
    left = np.clip(right - 1, 0, len(ts) - 1)
    pick = np.where(np.abs(ts[left] - grid) <= np.abs(ts[right] - grid), left, right)
    sub_rows = [rows[i] for i in pick]

    stride_steps = max(1, int(round(stride_s * float(step_rate))))
    values = np.stack([r.values for r in sub_rows])
    valid = np.asarray([r.valid for r in sub_rows], dtype=bool)
    # a pick far off its grid slot marks a camera gap, not a usable step
    valid &= np.abs(ts[pick] - grid) <= 0.6 * max(src_step_ms, tgt_step_ms)
    out: List[FeatureSequence] = []
    for start in range(0, len(sub_rows) - L + 1, stride_steps):
        window_valid = valid[start : start + L]
        if np.mean(~window_valid) > max_invalid_fraction:
            continue
        w_start = int(sub_rows[start].t)
        w_end = w_start + int(round(window_s * 1000))
        klass = classify_window(labels, w_start, w_end)
        out.append(
            FeatureSequence(
                window_start=w_start,
                steps=values[start : start + L],
                label=1 if klass == LabelClass.AGITATION else 0,
                person_id=person_id,
                participant_id=participant_id,
            )
        )
    return out


@dataclass
class PruneReport:
    kept: List[str]
    removed: List[str]
    corr_pos: np.ndarray
    corr_neg: np.ndarray
    threshold: float

    def to_doc(self) -> dict:
        return {
            "kept": self.kept,
            "removed": self.removed,
            "threshold": self.threshold,
        }


def _abs_corr(rows: np.ndarray) -> np.ndarray:
    """|Pearson r| with zero-variance columns pinned to r=0 off-diagonal."""
    d = rows.shape[1]
    centered = rows - rows.mean(axis=0)
    std = rows.std(axis=0)
    denom = np.outer(std, std) * len(rows)
    cov = centered.T @ centered
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0.0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    np.fill_diagonal(corr, 1.0)
    return np.abs(np.clip(corr, -1.0, 1.0))


def prune_by_class_correlation(
    pos: Sequence[FeatureSequence] | np.ndarray,
    neg: Sequence[FeatureSequence] | np.ndarray,
    threshold: float = 0.8,
    names: Optional[Sequence[str]] = None,
) -> PruneReport:
    """Greedy drop of features highly correlated with a kept one in BOTH
    classes; scan order is the canonical feature order, so the result is
    independent of sequence ordering within each class.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValidationError("threshold must lie in (0, 1]")

    def flatten(seqs) -> np.ndarray:
        if isinstance(seqs, np.ndarray):
            return seqs.reshape(-1, seqs.shape[-1]) if seqs.ndim == 3 else seqs
        if len(seqs) == 0:
            raise ValidationError("both classes must be non-empty")
        return np.concatenate([s.steps for s in seqs], axis=0)

    pos_rows = flatten(pos)
    neg_rows = flatten(neg)
    if len(pos_rows) == 0 or len(neg_rows) == 0:
        raise ValidationError("both classes must be non-empty")
    if pos_rows.shape[1] != neg_rows.shape[1]:
        raise ValidationError("classes must share one feature schema")
    d = pos_rows.shape[1]
    feature_names = list(names) if names else list(POSE_FEATURE_NAMES[:d])
    if len(feature_names) != d:
        raise ValidationError("names length must match feature count")

    corr_pos = _abs_corr(pos_rows)
    corr_neg = _abs_corr(neg_rows)
    kept_idx: List[int] = []
    removed_idx: List[int] = []
    for f in range(d):
        redundant = any(
            corr_pos[f, g] > threshold and corr_neg[f, g] > threshold for g in kept_idx
        )
        (removed_idx if redundant else kept_idx).append(f)
    return PruneReport(
        kept=[feature_names[i] for i in kept_idx],
        removed=[feature_names[i] for i in removed_idx],
        corr_pos=corr_pos,
        corr_neg=corr_neg,
        threshold=threshold,
    )


class CorrelationPruner(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit on (rows, binary labels), transform selects
    the kept columns."""

    def __init__(self, threshold: float = 0.8) -> None:
        self.threshold = threshold

    def fit(self, X, y, names: Optional[Sequence[str]] = None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        report = prune_by_class_correlation(
            X[y == 1], X[y == 0], self.threshold, names=names
        )
        self.report_ = report
        name_list = list(names) if names else list(POSE_FEATURE_NAMES[: X.shape[-1]])
        self.kept_indices_ = [name_list.index(n) for n in report.kept]
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X[..., self.kept_indices_]
