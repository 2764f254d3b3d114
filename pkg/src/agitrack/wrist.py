"""Wristband feature extraction: EDA decomposition, the per-minute
153-feature vector (9 channels x 17 features), and minute-cadence
digital-biomarker derivation from raw channels.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Channel, SampleSeries, Timestamp, ValidationError
from .ingest import ActivityClass, BiomarkerRecord

# Channel-major catalog order; stable across versions. Vector length 153.
CATALOG_CHANNELS: Tuple[Channel, ...] = (
    Channel.ACC_X,
    Channel.ACC_Y,
    Channel.ACC_Z,
    Channel.ACC_MAG,
    Channel.EDA,
    Channel.EDA_TONIC,
    Channel.EDA_PHASIC,
    Channel.TEMP,
    Channel.HR,
)

PER_CHANNEL_FEATURES: Tuple[str, ...] = (
    "mean",
    "std",
    "min",
    "max",
    "median",
    "iqr",
    "range",
    "rms",
    "skewness",
    "kurtosis",
    "mad",
    "zero_crossings",
    "peak_count",
    "autocorr_lag1",
    "dominant_freq_hz",
    "spectral_entropy",
    "haar_detail_fraction",
)

WINDOW_LEN_S = 60.0
MIN_VALID_FRACTION = 0.8


def catalog_names() -> List[str]:
    return [f"{c.value}.{f}" for c in CATALOG_CHANNELS for f in PER_CHANNEL_FEATURES]


def catalog_schema_hash() -> str:
    payload = ",".join(catalog_names()).encode()
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class FeatureVector:
    window_start: Timestamp
    names: Tuple[str, ...]
    values: np.ndarray
    valid_fraction: float
    window_len_s: float = WINDOW_LEN_S

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if len(self.names) != len(values):
            raise ValidationError("feature names and values must align")
        if np.any(~np.isfinite(values)):
            raise ValidationError("feature values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def usable(self) -> bool:
        return self.valid_fraction >= MIN_VALID_FRACTION


def _moving_average_masked(
    values: np.ndarray, validity: np.ndarray, half: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Centered, edge-truncated moving average ignoring invalid samples.

    Returns (average, count of valid samples in each window).
    """
    n = len(values)
    v = np.where(validity, values, 0.0)
    csum = np.concatenate(([0.0], np.cumsum(v)))
    ccnt = np.concatenate(([0], np.cumsum(validity.astype(np.int64))))
    idx = np.arange(n)
    lo = np.maximum(0, idx - half)
    hi = np.minimum(n, idx + half + 1)
    total = csum[hi] - csum[lo]
    count = ccnt[hi] - ccnt[lo]
    avg = np.divide(total, count, out=np.zeros(n), where=count > 0)
    return avg, count


def eda_decompose(eda: SampleSeries, span_s: float = 10.0) -> Dict[str, SampleSeries]:
    """Split EDA into slow tonic level and fast phasic residual.

    Tonic is a centered moving average over ``span_s`` seconds, truncated at
    the edges; phasic is the elementwise residual, so tonic + phasic
    reconstructs the input exactly wherever samples are valid.
    """
    if eda.channel != Channel.EDA:
        raise ValidationError(f"eda_decompose expects EDA, got {eda.channel}")
    if len(eda) == 0:
        empty = np.array([])
        none = np.array([], dtype=bool)
        return {
            "tonic": SampleSeries(Channel.EDA_TONIC, eda.rate_hz, eda.start, empty, none),
            "phasic": SampleSeries(Channel.EDA_PHASIC, eda.rate_hz, eda.start, empty, none),
        }
    half = int(round(span_s / 2 * float(eda.rate_hz)))
    avg, count = _moving_average_masked(eda.values, eda.validity, half)
    tonic_valid = eda.validity & (count > 0)
    tonic = np.where(tonic_valid, avg, 0.0)
    phasic = np.where(tonic_valid, eda.values - tonic, 0.0)
    return {
        "tonic": SampleSeries(Channel.EDA_TONIC, eda.rate_hz, eda.start, tonic, tonic_valid),
        "phasic": SampleSeries(Channel.EDA_PHASIC, eda.rate_hz, eda.start, phasic, tonic_valid),
    }


def channel_features(values: np.ndarray, rate_hz: float) -> np.ndarray:
    """The 17 per-channel features, in PER_CHANNEL_FEATURES order.

    Degenerate statistics (constant or near-empty windows) are defined as 0
    so downstream classifiers never see NaN.
    """
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    out = np.zeros(len(PER_CHANNEL_FEATURES))
    if n == 0:
        return out
    lo = float(np.min(x))
    hi = float(np.max(x))
    if hi == lo:  # exactly constant: degenerate statistics are 0 by convention
        c = lo
        out[:8] = (c, 0.0, c, c, c, 0.0, 0.0, abs(c))
        return out
    mean = float(np.mean(x))
    std = float(np.std(x))
    q25, q75 = np.percentile(x, [25.0, 75.0])
    rms = float(np.sqrt(np.mean(np.square(x))))
    centered = x - mean
    if std > 0.0:
        skew = float(np.mean(centered**3) / std**3)
        kurt = float(np.mean(centered**4) / std**4 - 3.0)
    else:
        skew = 0.0
        kurt = 0.0
    mad = float(np.mean(np.abs(centered)))

    zc = int(np.count_nonzero(centered[:-1] * centered[1:] < 0.0)) if n > 1 else 0

    peaks = 0
    if n > 2:
        mid = x[1:-1]
        is_peak = (mid > x[:-2]) & (mid > x[2:]) & (mid > mean + 0.5 * std)
        peaks = int(np.count_nonzero(is_peak))

    denom = float(np.dot(centered, centered))
    ac1 = float(np.dot(centered[:-1], centered[1:]) / denom) if denom > 0 and n > 1 else 0.0

    dom_freq = 0.0
    spec_entropy = 0.0
    if n > 1 and std > 0.0:
        mags = np.abs(np.fft.rfft(centered))[1:]  # drop the (zero) DC bin
        power = np.square(mags)
        total = float(np.sum(power))
        if total > 0.0 and len(power) > 0:
            k = int(np.argmax(mags)) + 1
            dom_freq = k * rate_hz / n
            if len(power) > 1:
                p = power / total
                nz = p[p > 0.0]
                spec_entropy = float(-np.sum(nz * np.log(nz)) / np.log(len(power)))

    haar = 0.0
    if n > 1:
        m = (n // 2) * 2
        pairs = centered[:m].reshape(-1, 2)
        detail = (pairs[:, 0] - pairs[:, 1]) / np.sqrt(2.0)
        approx = (pairs[:, 0] + pairs[:, 1]) / np.sqrt(2.0)
        e_d = float(np.dot(detail, detail))
        e_a = float(np.dot(approx, approx))
        if e_d + e_a > 0.0:
            haar = e_d / (e_d + e_a)

    out[:] = (
        mean,
        std,
        lo,
        hi,
        float(np.median(x)),
        float(q75 - q25),
        hi - lo,
        rms,
        skew,
        kurt,
        mad,
        float(zc),
        float(peaks),
        ac1,
        dom_freq,
        spec_entropy,
        haar,
    )
    return out


def extract_window_features(
    channels: Dict[Channel, SampleSeries],
    window_start: Timestamp,
    window_len_s: float = WINDOW_LEN_S,
) -> FeatureVector:
    """One 153-value feature vector for the window starting at window_start.

    Statistics run over the window's valid samples only; valid_fraction is
    the minimum valid share across channels and gates training/scoring use.
    """
    win_ms = int(round(window_len_s * 1000))
    values = np.zeros(len(CATALOG_CHANNELS) * len(PER_CHANNEL_FEATURES))
    valid_fraction = 1.0
    for ci, channel in enumerate(CATALOG_CHANNELS):
        series = channels.get(channel)
        if series is None:
            raise ValidationError(f"missing required channel: {channel.value}")
        if window_start + win_ms > series.end:
            raise ValidationError(
                f"window [{window_start},{window_start + win_ms}) extends past "
                f"end of {channel.value} ({series.end})"
            )
        sl = series.slice_window(window_start, window_start + win_ms)
        expected = float(Fraction(win_ms) * series.rate_hz / 1000)
        share = min(1.0, np.count_nonzero(sl.validity) / expected) if expected else 0.0
        valid_fraction = min(valid_fraction, share)
        feats = channel_features(sl.values[sl.validity], float(series.rate_hz))
        base = ci * len(PER_CHANNEL_FEATURES)
        values[base : base + len(PER_CHANNEL_FEATURES)] = feats
    return FeatureVector(
        window_start=window_start,
        names=tuple(catalog_names()),
        values=values,
        valid_fraction=valid_fraction,
        window_len_s=window_len_s,
    )


def prepare_catalog_channels(
    raw: Dict[Channel, SampleSeries]
) -> Dict[Channel, SampleSeries]:
    """Fill in EDA tonic/phasic (and pass through the rest) for the catalog."""
    out = dict(raw)
    if Channel.EDA in out and (
        Channel.EDA_TONIC not in out or Channel.EDA_PHASIC not in out
    ):
        parts = eda_decompose(out[Channel.EDA])
        out[Channel.EDA_TONIC] = parts["tonic"]
        out[Channel.EDA_PHASIC] = parts["phasic"]
    return out


@dataclass
class WindowDataset:
    """Per-minute feature matrix with labels and validity, CSV-serializable."""

    schema: Tuple[str, ...]
    window_starts: np.ndarray
    rows: np.ndarray
    labels: np.ndarray  # LabelClass values as strings
    valid_fractions: np.ndarray

    def usable_mask(self) -> np.ndarray:
        return self.valid_fractions >= MIN_VALID_FRACTION

    def binary_labels(self, include_preagitation: bool = False) -> np.ndarray:
        pos = self.labels == "agitation"
        if include_preagitation:
            pos |= self.labels == "pre_agitation"
        return pos.astype(np.int64)

    def training_mask(self, include_preagitation: bool = False) -> np.ndarray:
        """Usable windows; pre-agitation excluded unless mapped to positive."""
        mask = self.usable_mask()
        if not include_preagitation:
            mask = mask & (self.labels != "pre_agitation")
        return mask

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("window_start_ms,label,valid_fraction," + ",".join(self.schema) + "\n")
            for i in range(len(self.rows)):
                cells = [format(v, ".9g") for v in self.rows[i]]
                prefix = (
                    f"{int(self.window_starts[i])},{self.labels[i]},"
                    f"{format(self.valid_fractions[i], '.9g')}"
                )
                fh.write(prefix + "," + ",".join(cells) + "\n")

    @classmethod
    def read_csv(cls, path: str) -> "WindowDataset":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise ValidationError(f"{path}: empty feature matrix")
        header = lines[0].split(",")
        if header[:3] != ["window_start_ms", "label", "valid_fraction"]:
            raise ValidationError(f"{path}: unexpected feature matrix header")
        schema = tuple(header[3:])
        starts, labels, fracs, rows = [], [], [], []
        for line in lines[1:]:
            if not line.strip():
                continue
            parts = line.split(",")
            starts.append(int(parts[0]))
            labels.append(parts[1])
            fracs.append(float(parts[2]))
            rows.append([float(v) for v in parts[3:]])
        return cls(
            schema=schema,
            window_starts=np.asarray(starts, dtype=np.int64),
            rows=np.asarray(rows, dtype=np.float64),
            labels=np.asarray(labels, dtype=object),
            valid_fractions=np.asarray(fracs, dtype=np.float64),
        )


BIOMARKER_COLUMNS = (
    "bm.pulse_rate_bpm",
    "bm.prv_ms",
    "bm.activity_counts",
    "bm.accel_std",
    "bm.steps",
    "bm.scl_us",
)


def _biomarker_row(rec: Optional[BiomarkerRecord]) -> List[float]:
    if rec is None:
        return [0.0] * len(BIOMARKER_COLUMNS)
    cells = (
        rec.pulse_rate_bpm,
        rec.prv_ms,
        rec.activity_counts,
        rec.accel_std,
        rec.steps,
        rec.scl_us,
    )
    return [0.0 if v is None else float(v) for v in cells]


def build_window_dataset(
    channels: Dict[Channel, SampleSeries],
    intervals: Sequence,
    t0: Timestamp,
    t_end: Timestamp,
    window_len_s: float = WINDOW_LEN_S,
    stride_s: float = WINDOW_LEN_S,
    include_biomarkers: bool = False,
) -> WindowDataset:
    """Extract one FeatureVector per stride-aligned window and label it with
    the 50%-coverage rule.

    include_biomarkers appends the per-minute derived biomarker values as
    extra bm.* columns (off by default; the canonical 153-column schema is
    what realtime scoring validates against).
    """
    from .core import label_windows

    prepared = prepare_catalog_channels(channels)
    window_labels = label_windows(intervals, window_len_s, stride_s, (t0, t_end))
    bm_by_minute: Dict[int, BiomarkerRecord] = {}
    if include_biomarkers:
        bm_by_minute = {rec.t: rec for rec in derive_biomarkers(channels)}
    starts, rows, labels, fracs = [], [], [], []
    for wl in window_labels:
        fv = extract_window_features(prepared, wl.window_start, window_len_s)
        values = fv.values
        if include_biomarkers:
            values = np.concatenate(
                [values, _biomarker_row(bm_by_minute.get(wl.window_start))]
            )
        starts.append(wl.window_start)
        rows.append(values)
        labels.append(wl.klass.value)
        fracs.append(fv.valid_fraction)
    schema = tuple(catalog_names()) + (
        BIOMARKER_COLUMNS if include_biomarkers else ()
    )
    return WindowDataset(
        schema=schema,
        window_starts=np.asarray(starts, dtype=np.int64),
        rows=np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(schema))),
        labels=np.asarray(labels, dtype=object),
        valid_fractions=np.asarray(fracs, dtype=np.float64),
    )


def _strict_peaks(x: np.ndarray, threshold: float) -> np.ndarray:
    if len(x) < 3:
        return np.array([], dtype=np.int64)
    mid = x[1:-1]
    mask = (mid > x[:-2]) & (mid > x[2:]) & (mid > threshold)
    return np.nonzero(mask)[0] + 1


def _peaks_with_separation(
    x: np.ndarray, threshold: float, min_sep: int
) -> List[int]:
    picked: List[int] = []
    for i in _strict_peaks(x, threshold):
        if not picked or i - picked[-1] >= min_sep:
            picked.append(int(i))
    return picked


def _smooth_odd(x: np.ndarray, width: int) -> np.ndarray:
    width = max(1, width | 1)
    if width == 1 or len(x) < width:
        return x
    kernel = np.full(width, 1.0 / width)
    return np.convolve(x, kernel, mode="same")


def _bvp_minute_pulse(
    bvp: SampleSeries, start_ms: int
) -> Tuple[Optional[float], Optional[float]]:
    """(pulse bpm, prv ms) from one minute of BVP via 10-s peak counting.

    The segment is lightly smoothed before counting so sensor noise on the
    flat wave crest does not split one beat into several, and beats closer
    than a 0.25 s refractory are rejected.
    """
    rate = float(bvp.rate_hz)
    refractory = max(1, int(round(0.25 * rate)))
    estimates: List[float] = []
    beat_times: List[float] = []
    for k in range(6):
        seg = bvp.slice_window(start_ms + k * 10_000, start_ms + (k + 1) * 10_000)
        vals = seg.values[seg.validity]
        if len(vals) < int(5 * rate):
            continue
        detrended = vals - np.mean(vals)
        smoothed = _smooth_odd(detrended, int(round(0.08 * rate)))
        thr = 0.5 * float(np.std(smoothed))
        peaks = _peaks_with_separation(smoothed, thr, refractory)
        estimates.append(len(peaks) * 6.0)
        step = 1000.0 / rate
        offsets = np.nonzero(seg.validity)[0]
        for p in peaks:
            beat_times.append(seg.start + offsets[p] * step)
    if not estimates:
        return None, None
    pulse = float(np.median(estimates))
    prv = None
    if len(beat_times) >= 3:
        ibis = np.diff(np.sort(np.asarray(beat_times)))
        prv = float(np.std(ibis))
    return pulse, prv


def derive_biomarkers(
    channels: Dict[Channel, SampleSeries],
    counts_threshold_g: float = 0.05,
    moving_counts: int = 10,
) -> List[BiomarkerRecord]:
    """Minute-cadence biomarkers recomputed from raw channels.

    Pulse rate prefers BVP beat counting (median of six 10-s estimates) and
    falls back to the mean of the HR channel; respiratory rate and sleep
    stage are vendor-proprietary and never computed here.
    """
    prepared = prepare_catalog_channels(channels)
    acc = prepared.get(Channel.ACC_MAG)
    bvp = prepared.get(Channel.BVP)
    hr = prepared.get(Channel.HR)
    eda = prepared.get(Channel.EDA)
    tonic = prepared.get(Channel.EDA_TONIC)
    temp = prepared.get(Channel.TEMP)

    present = [s for s in (acc, bvp, hr, eda, temp) if s is not None]
    if not present:
        return []
    t0 = min(s.start for s in present)
    t_end = max(s.end for s in present)

    highpass = None
    if acc is not None:
        half = int(round(0.5 * float(acc.rate_hz)))
        avg, _ = _moving_average_masked(acc.values, acc.validity, half)
        highpass = np.where(acc.validity, acc.values - avg, 0.0)

    records: List[BiomarkerRecord] = []
    minute = t0
    while minute + 60_000 <= t_end:
        pulse = prv = None
        if bvp is not None:
            pulse, prv = _bvp_minute_pulse(bvp, minute)
        if pulse is None and hr is not None:
            seg = hr.slice_window(minute, minute + 60_000)
            vals = seg.values[seg.validity]
            if len(vals):
                pulse = float(np.mean(vals))

        counts = accel_std = steps = None
        if acc is not None:
            i0, i1 = acc.index_range(minute, minute + 60_000)
            seg_valid = acc.validity[i0:i1]
            if np.any(seg_valid):
                hp = highpass[i0:i1][seg_valid]
                counts = int(np.count_nonzero(np.abs(hp) > counts_threshold_g))
                vals = acc.values[i0:i1][seg_valid]
                accel_std = float(np.std(vals))
                thr = float(np.mean(vals) + np.std(vals))
                min_sep = max(1, int(round(0.3 * float(acc.rate_hz))))
                steps = len(_peaks_with_separation(vals, thr, min_sep))

        scl = None
        if tonic is not None:
            seg = tonic.slice_window(minute, minute + 60_000)
            vals = seg.values[seg.validity]
            if len(vals):
                scl = float(np.mean(vals))

        temp_c = None
        if temp is not None:
            seg = temp.slice_window(minute, minute + 60_000)
            vals = seg.values[seg.validity]
            if len(vals):
                temp_c = float(np.clip(np.mean(vals), 20.0, 45.0))

        wearing = None
        if temp_c is not None and eda is not None:
            seg = eda.slice_window(minute, minute + 60_000)
            vals = seg.values[seg.validity]
            if len(vals):
                wearing = bool(28.0 <= temp_c <= 40.0 and float(np.mean(vals)) > 0.03)

        activity = None
        if counts is not None:
            activity = (
                ActivityClass.MOVING if counts > moving_counts else ActivityClass.STATIONARY
            )

        records.append(
            BiomarkerRecord(
                t=minute,
                pulse_rate_bpm=pulse,
                prv_ms=prv,
                activity_counts=counts,
                accel_std=accel_std,
                steps=steps,
                scl_us=scl,
                wearing=wearing,
                temp_c=temp_c,
                activity_class=activity,
            )
        )
        minute += 60_000
    return records
