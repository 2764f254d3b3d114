"""Session ingest: raw channel CSVs, minute biomarkers, keypoints, labels.

File layout per session directory:
  eda.csv / temp.csv / bvp.csv / hr.csv   header ``t_ms,value``
  acc.csv                                 header ``t_ms,x,y,z``
  biomarkers.csv                          vendor minute-cadence metrics
  keypoints.jsonl                         one ``{t_ms, person_id, kp}`` per line
  labels.csv / truth.csv                  ``start_ms,end_ms,class,source``
  session.meta                            key=value lines

Raw files may carry a ``# rate_hz=<value>`` comment before the header to
override the default native rate. Gaps are masked invalid, never
interpolated: off-wrist periods must not fabricate physiology.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    Channel,
    LabelClass,
    LabelInterval,
    LabelSource,
    RateLike,
    SampleSeries,
    SessionMeta,
    Timestamp,
    ValidationError,
    acc_magnitude,
    as_rate,
    normalize_intervals,
)

DEFAULT_RATES: Dict[Channel, Fraction] = {
    Channel.ACC_X: Fraction(32),
    Channel.ACC_Y: Fraction(32),
    Channel.ACC_Z: Fraction(32),
    Channel.ACC_MAG: Fraction(32),
    Channel.BVP: Fraction(64),
    Channel.EDA: Fraction(4),
    Channel.TEMP: Fraction(1),
    Channel.HR: Fraction(1),
}

SCALAR_FILES: Dict[str, Channel] = {
    "eda.csv": Channel.EDA,
    "temp.csv": Channel.TEMP,
    "bvp.csv": Channel.BVP,
    "hr.csv": Channel.HR,
}

BIOMARKER_HEADER = (
    "t_ms,pulse_rate_bpm,prv_ms,resp_rate_bpm,activity_counts,accel_std,"
    "steps,scl_us,wearing,temp_c,sleep_stage,activity_class"
)


class ActivityClass(str, Enum):
    STATIONARY = "stationary"
    MOVING = "moving"


@dataclass(frozen=True)
class BiomarkerRecord:
    """One minute of vendor-style digital biomarkers; absent fields are None."""

    t: Timestamp
    pulse_rate_bpm: Optional[float] = None
    prv_ms: Optional[float] = None
    resp_rate_bpm: Optional[float] = None
    activity_counts: Optional[int] = None
    accel_std: Optional[float] = None
    steps: Optional[int] = None
    scl_us: Optional[float] = None
    wearing: Optional[bool] = None
    temp_c: Optional[float] = None
    sleep_stage: Optional[int] = None
    activity_class: Optional[ActivityClass] = None

    def __post_init__(self) -> None:
        if self.scl_us is not None and self.scl_us < 0:
            raise ValidationError("scl_us must be >= 0")
        if self.temp_c is not None and not (20.0 <= self.temp_c <= 45.0):
            raise ValidationError(f"temp_c out of range [20,45]: {self.temp_c}")
        if self.activity_counts is not None and self.activity_counts < 0:
            raise ValidationError("activity_counts must be >= 0")
        if self.steps is not None and self.steps < 0:
            raise ValidationError("steps must be >= 0")


N_KEYPOINTS = 18


@dataclass(frozen=True)
class KeypointFrame:
    """One timestamped 18-point skeleton for one tracked person.

    points is (18, 3) float: x px, y px, confidence in [0,1]; confidence 0
    marks a missing point whose x,y must be ignored.
    """

    t: Timestamp
    person_id: str
    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_KEYPOINTS, 3):
            raise ValidationError(
                f"keypoint frame must have exactly {N_KEYPOINTS} points, got {pts.shape}"
            )
        if np.any(pts[:, 2] < 0) or np.any(pts[:, 2] > 1):
            raise ValidationError("keypoint confidences must lie in [0,1]")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


@dataclass
class Session:
    meta: SessionMeta
    series: Dict[Channel, SampleSeries] = field(default_factory=dict)
    biomarkers: List[BiomarkerRecord] = field(default_factory=list)
    keypoints: List[KeypointFrame] = field(default_factory=list)
    labels: List[LabelInterval] = field(default_factory=list)

    def end(self) -> Timestamp:
        return self.meta.t0 + int(round(self.meta.duration_s * 1000))


def _fmt(value: float) -> str:
    return format(float(value), ".9g")


class ParseError(ValidationError):
    def __init__(self, path: str, line_no: int, message: str) -> None:
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


def _read_lines(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().splitlines()


def _parse_rate_header(lines: Sequence[str]) -> Tuple[Optional[Fraction], int]:
    """Return (declared rate, index of the header row)."""
    rate = None
    idx = 0
    while idx < len(lines) and lines[idx].startswith("#"):
        text = lines[idx][1:].strip()
        if text.startswith("rate_hz="):
            rate = as_rate(text.split("=", 1)[1])
        idx += 1
    return rate, idx


def _grid_from_timestamps(
    path: str, ts: np.ndarray, rate: Fraction, first_line: int
) -> Tuple[np.ndarray, int]:
    """Map raw timestamps onto the uniform grid anchored at the first sample.

    Returns (slot index per sample, total slots). Raises on rate mismatch.
    """
    step = 1000.0 / float(rate)
    rel = ts - ts[0]
    slots = np.round(rel / step).astype(np.int64)
    if np.any(np.diff(slots) < 1):
        bad = int(np.where(np.diff(slots) < 1)[0][0]) + 1
        raise ParseError(
            path, first_line + bad, f"timestamp spacing below declared rate {rate} Hz"
        )
    residual = np.abs(rel - slots * step)
    tol = max(0.6, 0.01 * step)
    if np.any(residual > tol):
        bad = int(np.argmax(residual > tol))
        raise ParseError(
            path,
            first_line + bad,
            f"timestamp off the {rate} Hz grid by {residual[bad]:.3f} ms",
        )
    deltas = np.diff(slots)
    unit = np.diff(rel)[deltas == 1]
    if len(ts) > 1:
        if unit.size == 0:
            raise ParseError(path, first_line, f"no adjacent samples at {rate} Hz")
        mean_step = float(np.mean(unit))
        if abs(mean_step - step) > 0.01 * step:
            raise ParseError(
                path,
                first_line,
                f"mean spacing {mean_step:.4f} ms departs from declared "
                f"{rate} Hz ({step:.4f} ms) by more than 1%",
            )
    return slots, int(slots[-1]) + 1


def _series_from_columns(
    path: str,
    channel: Channel,
    ts: np.ndarray,
    col: np.ndarray,
    rate: Fraction,
    first_line: int,
) -> SampleSeries:
    slots, n_slots = _grid_from_timestamps(path, ts, rate, first_line)
    values = np.zeros(n_slots, dtype=np.float64)
    validity = np.zeros(n_slots, dtype=bool)
    values[slots] = col
    validity[slots] = True
    return SampleSeries(channel, rate, int(ts[0]), values, validity)


def read_scalar_channel(
    path: str, channel: Channel, default_rate: Optional[RateLike] = None
) -> SampleSeries:
    lines = _read_lines(path)
    declared, idx = _parse_rate_header(lines)
    rate = declared or as_rate(default_rate or DEFAULT_RATES[channel])
    if idx >= len(lines) or lines[idx].strip() != "t_ms,value":
        raise ParseError(path, idx + 1, "expected header 't_ms,value'")
    ts: List[int] = []
    vals: List[float] = []
    for n, line in enumerate(lines[idx + 1 :], start=idx + 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(path, n, f"expected 2 columns, got {len(parts)}")
        try:
            t = int(parts[0])
            v = float(parts[1])
        except ValueError as exc:
            raise ParseError(path, n, str(exc)) from None
        if ts and t <= ts[-1]:
            raise ParseError(path, n, "timestamps must be strictly increasing")
        ts.append(t)
        vals.append(v)
    if not ts:
        raise ParseError(path, idx + 1, "no samples")
    return _series_from_columns(
        path, channel, np.asarray(ts, dtype=np.float64), np.asarray(vals), rate, idx + 2
    )


def read_acc(path: str, default_rate: Optional[RateLike] = None) -> Dict[Channel, SampleSeries]:
    lines = _read_lines(path)
    declared, idx = _parse_rate_header(lines)
    rate = declared or as_rate(default_rate or DEFAULT_RATES[Channel.ACC_X])
    if idx >= len(lines) or lines[idx].strip() != "t_ms,x,y,z":
        raise ParseError(path, idx + 1, "expected header 't_ms,x,y,z'")
    ts: List[int] = []
    xyz: List[Tuple[float, float, float]] = []
    for n, line in enumerate(lines[idx + 1 :], start=idx + 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(path, n, f"expected 4 columns, got {len(parts)}")
        try:
            t = int(parts[0])
            row = (float(parts[1]), float(parts[2]), float(parts[3]))
        except ValueError as exc:
            raise ParseError(path, n, str(exc)) from None
        if ts and t <= ts[-1]:
            raise ParseError(path, n, "timestamps must be strictly increasing")
        ts.append(t)
        xyz.append(row)
    if not ts:
        raise ParseError(path, idx + 1, "no samples")
    arr = np.asarray(xyz, dtype=np.float64)
    t_arr = np.asarray(ts, dtype=np.float64)
    out = {}
    for channel, col in (
        (Channel.ACC_X, arr[:, 0]),
        (Channel.ACC_Y, arr[:, 1]),
        (Channel.ACC_Z, arr[:, 2]),
        (Channel.ACC_MAG, acc_magnitude(arr[:, 0], arr[:, 1], arr[:, 2])),
    ):
        out[channel] = _series_from_columns(path, channel, t_arr, col, rate, idx + 2)
    return out


def _opt_float(cell: str) -> Optional[float]:
    return float(cell) if cell.strip() else None


def _opt_int(cell: str) -> Optional[int]:
    return int(cell) if cell.strip() else None


def _opt_bool(cell: str) -> Optional[bool]:
    cell = cell.strip().lower()
    if not cell:
        return None
    if cell in ("true", "1"):
        return True
    if cell in ("false", "0"):
        return False
    raise ValueError(f"not a boolean: {cell!r}")


def read_biomarkers(path: str) -> List[BiomarkerRecord]:
    lines = _read_lines(path)
    if not lines or lines[0].strip() != BIOMARKER_HEADER:
        raise ParseError(path, 1, f"expected header '{BIOMARKER_HEADER}'")
    records: List[BiomarkerRecord] = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 12:
            raise ParseError(path, n, f"expected 12 columns, got {len(parts)}")
        try:
            activity = parts[11].strip().lower()
            rec = BiomarkerRecord(
                t=int(parts[0]),
                pulse_rate_bpm=_opt_float(parts[1]),
                prv_ms=_opt_float(parts[2]),
                resp_rate_bpm=_opt_float(parts[3]),
                activity_counts=_opt_int(parts[4]),
                accel_std=_opt_float(parts[5]),
                steps=_opt_int(parts[6]),
                scl_us=_opt_float(parts[7]),
                wearing=_opt_bool(parts[8]),
                temp_c=_opt_float(parts[9]),
                sleep_stage=_opt_int(parts[10]),
                activity_class=ActivityClass(activity) if activity else None,
            )
        except (ValueError, ValidationError) as exc:
            raise ParseError(path, n, str(exc)) from None
        if records and rec.t <= records[-1].t:
            raise ParseError(path, n, "timestamps must be strictly increasing")
        records.append(rec)
    return records


def read_keypoints(path: str) -> List[KeypointFrame]:
    frames: List[KeypointFrame] = []
    for n, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            frame = KeypointFrame(
                t=int(doc["t_ms"]),
                person_id=str(doc["person_id"]),
                points=np.asarray(doc["kp"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError, ValidationError) as exc:
            raise ParseError(path, n, str(exc)) from None
        frames.append(frame)
    frames.sort(key=lambda f: (f.t, f.person_id))
    return frames


def read_labels(
    path: str, clock_offsets: Optional[Dict[LabelSource, int]] = None
) -> List[LabelInterval]:
    lines = _read_lines(path)
    if not lines or lines[0].strip() != "start_ms,end_ms,class,source":
        raise ParseError(path, 1, "expected header 'start_ms,end_ms,class,source'")
    offsets = clock_offsets or {}
    intervals: List[LabelInterval] = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(path, n, f"expected 4 columns, got {len(parts)}")
        try:
            source = LabelSource(parts[3].strip())
            shift = offsets.get(source, 0)
            iv = LabelInterval(
                start=int(parts[0]) + shift,
                end=int(parts[1]) + shift,
                klass=LabelClass(parts[2].strip()),
                source=source,
            )
        except (ValueError, ValidationError) as exc:
            raise ParseError(path, n, str(exc)) from None
        intervals.append(iv)
    return normalize_intervals(intervals)


def read_session_meta(path: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, line in enumerate(_read_lines(path), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(path, n, "expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_session(
    dir_path: str,
    clock_offsets: Optional[Dict[LabelSource, int]] = None,
    rates: Optional[Dict[Channel, RateLike]] = None,
) -> Session:
    """Load and validate one session directory.

    Requires at least one raw-channel file or a keypoints file. Derived
    ACC_MAG is recomputed from the axes on load.
    """
    rates = rates or {}
    series: Dict[Channel, SampleSeries] = {}
    acc_path = os.path.join(dir_path, "acc.csv")
    if os.path.exists(acc_path):
        series.update(read_acc(acc_path, rates.get(Channel.ACC_X)))
    for name, channel in SCALAR_FILES.items():
        path = os.path.join(dir_path, name)
        if os.path.exists(path):
            series[channel] = read_scalar_channel(path, channel, rates.get(channel))

    keypoints: List[KeypointFrame] = []
    kp_path = os.path.join(dir_path, "keypoints.jsonl")
    if os.path.exists(kp_path):
        keypoints = read_keypoints(kp_path)

    if not series and not keypoints:
        raise ValidationError(
            f"{dir_path}: need at least one raw-channel file or keypoints.jsonl"
        )

    biomarkers: List[BiomarkerRecord] = []
    bm_path = os.path.join(dir_path, "biomarkers.csv")
    if os.path.exists(bm_path):
        biomarkers = read_biomarkers(bm_path)

    labels: List[LabelInterval] = []
    for name in ("labels.csv", "truth.csv"):
        path = os.path.join(dir_path, name)
        if os.path.exists(path):
            labels.extend(read_labels(path, clock_offsets))
    labels = normalize_intervals(labels)

    meta_path = os.path.join(dir_path, "session.meta")
    kv = read_session_meta(meta_path) if os.path.exists(meta_path) else {}
    starts = [s.start for s in series.values()] + [f.t for f in keypoints[:1]]
    ends = [s.end for s in series.values()] + [f.t + 1 for f in keypoints[-1:]]
    t0 = int(kv.get("t0_ms", min(starts)))
    duration_s = float(kv.get("duration_s", (max(ends) - t0) / 1000.0))
    meta = SessionMeta(
        session_id=kv.get("session_id", os.path.basename(os.path.normpath(dir_path))),
        participant_id=kv.get("participant_id", "unknown"),
        t0=t0,
        duration_s=duration_s,
    )
    return Session(meta, series, biomarkers, keypoints, labels)


def write_session(session: Session, dir_path: str, truth_file: bool = False) -> None:
    """Write a session in the ingest layout; floats at 9 significant digits."""
    os.makedirs(dir_path, exist_ok=True)
    acc = {
        c: session.series[c]
        for c in (Channel.ACC_X, Channel.ACC_Y, Channel.ACC_Z)
        if c in session.series
    }
    if len(acc) == 3:
        x, y, z = (acc[c] for c in (Channel.ACC_X, Channel.ACC_Y, Channel.ACC_Z))
        ts = x.timestamps_ms()
        valid = x.validity & y.validity & z.validity
        with open(os.path.join(dir_path, "acc.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"# rate_hz={x.rate_hz}\n")
            fh.write("t_ms,x,y,z\n")
            for i in np.nonzero(valid)[0]:
                fh.write(
                    f"{ts[i]},{_fmt(x.values[i])},{_fmt(y.values[i])},{_fmt(z.values[i])}\n"
                )
    for name, channel in SCALAR_FILES.items():
        s = session.series.get(channel)
        if s is None:
            continue
        ts = s.timestamps_ms()
        with open(os.path.join(dir_path, name), "w", encoding="utf-8") as fh:
            fh.write(f"# rate_hz={s.rate_hz}\n")
            fh.write("t_ms,value\n")
            for i in np.nonzero(s.validity)[0]:
                fh.write(f"{ts[i]},{_fmt(s.values[i])}\n")
    if session.keypoints:
        with open(os.path.join(dir_path, "keypoints.jsonl"), "w", encoding="utf-8") as fh:
            for frame in session.keypoints:
                kp = [
                    [float(_fmt(x)), float(_fmt(y)), float(_fmt(c))]
                    for x, y, c in frame.points
                ]
                fh.write(
                    json.dumps(
                        {"t_ms": frame.t, "person_id": frame.person_id, "kp": kp},
                        separators=(",", ":"),
                    )
                    + "\n"
                )
    if session.biomarkers:
        write_biomarkers(session.biomarkers, os.path.join(dir_path, "biomarkers.csv"))
    if session.labels:
        name = "truth.csv" if truth_file else "labels.csv"
        write_labels(session.labels, os.path.join(dir_path, name))
    with open(os.path.join(dir_path, "session.meta"), "w", encoding="utf-8") as fh:
        fh.write(f"session_id={session.meta.session_id}\n")
        fh.write(f"participant_id={session.meta.participant_id}\n")
        fh.write(f"t0_ms={session.meta.t0}\n")
        fh.write(f"duration_s={_fmt(session.meta.duration_s)}\n")


def write_labels(intervals: Sequence[LabelInterval], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("start_ms,end_ms,class,source\n")
        for iv in sorted(intervals, key=lambda iv: (iv.start, iv.end, iv.klass.value)):
            fh.write(f"{iv.start},{iv.end},{iv.klass.value},{iv.source.value}\n")


def write_biomarkers(records: Sequence[BiomarkerRecord], path: str) -> None:
    def cell(v, fmt=_fmt):
        return "" if v is None else (fmt(v) if isinstance(v, float) else str(v))

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(BIOMARKER_HEADER + "\n")
        for r in records:
            wearing = "" if r.wearing is None else ("true" if r.wearing else "false")
            activity = "" if r.activity_class is None else r.activity_class.value
            fh.write(
                ",".join(
                    [
                        str(r.t),
                        cell(r.pulse_rate_bpm),
                        cell(r.prv_ms),
                        cell(r.resp_rate_bpm),
                        cell(r.activity_counts),
                        cell(r.accel_std),
                        cell(r.steps),
                        cell(r.scl_us),
                        wearing,
                        cell(r.temp_c),
                        cell(r.sleep_stage),
                        activity,
                    ]
                )
                + "\n"
            )


def resample_hold(series: SampleSeries, target_hz: RateLike) -> SampleSeries:
    """Last-observation-carried-forward onto the target grid.

    The output grid starts at the source start, so there is never
    extrapolation before the first sample; validity is carried from the
    source sample each output slot falls on.
    """
    target = as_rate(target_hz)
    if len(series) == 0:
        return SampleSeries(series.channel, target, series.start, np.array([]), np.array([], dtype=bool))
    last_t = series.sample_time(len(series) - 1)
    n_out = int(Fraction(last_t - series.start) * target / 1000) + 1
    step_src = 1000.0 / float(series.rate_hz)
    step_tgt = 1000.0 / float(target)
    rel = np.arange(n_out) * step_tgt
    src_idx = np.floor(rel / step_src + 1e-9).astype(np.int64)
    src_idx = np.clip(src_idx, 0, len(series) - 1)
    return SampleSeries(
        series.channel,
        target,
        series.start,
        series.values[src_idx],
        series.validity[src_idx],
    )
