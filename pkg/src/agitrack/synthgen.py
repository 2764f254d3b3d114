"""Deterministic synthetic multimodal sessions with ground-truth regimes.

Stands in for clinical recordings: normal wander, a pre-agitation ramp over
the lead window, and high-variance agitation bursts, across HR/BVP/EDA/TEMP/
ACC plus a keypoint stream (idle jitter, pacing, or flailing). Every draw
comes from one seeded generator, so equal specs produce byte-identical
session directories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import (
    Channel,
    LabelClass,
    LabelInterval,
    LabelSource,
    SampleSeries,
    SessionMeta,
    ValidationError,
)
from .ingest import KeypointFrame, N_KEYPOINTS, Session, write_session
from . import wrist
from . import pose

MOTION_STYLES = ("idle", "pacing", "flailing")


@dataclass
class Episode:
    agitation_start_s: float
    agitation_len_s: float
    preagitation_lead_s: float = 360.0
    motion_style: str = "flailing"

    def __post_init__(self) -> None:
        if self.agitation_len_s <= 0 or self.preagitation_lead_s < 0:
            raise ValidationError("episode lengths must be positive, lead >= 0")
        if self.motion_style not in ("pacing", "flailing"):
            raise ValidationError(f"unknown motion style: {self.motion_style}")


@dataclass
class EffectConfig:
    """Baselines and regime effect sizes, directionally anchored to the
    observed ranges: pulse 55-80 bpm rising to 90-110, activity counts
    surging to 50-140 per minute, tonic EDA rising before onset."""

    hr_base_bpm: float = 67.0
    hr_drift_bpm: float = 2.5
    hr_agitation_bpm: float = 100.0
    hr_noise_bpm: float = 1.0
    hr_burst_bpm: float = 5.0
    eda_base_us: float = 2.0
    eda_wander_us: float = 0.15
    eda_agitation_us: float = 1.5
    scr_per_min_normal: float = 1.0
    scr_per_min_agitated: float = 8.0
    scr_amp_us: float = 0.25
    temp_base_c: float = 33.5
    temp_wander_c: float = 0.4
    temp_agitation_c: float = 0.8
    acc_jitter_g: float = 0.004
    burst_amp_normal_g: float = 0.12
    burst_amp_agitated_g: float = 0.45
    bursts_per_min_normal: float = 0.6
    bursts_per_min_agitated: float = 14.0
    burst_len_s: float = 0.7
    # pre-agitation ramp: quick small rise at lead start (what the minute
    # -cadence lead detector keys on), full agitation levels only near onset
    # (so the binary AA detector does not open minutes early)
    ramp_plateau: float = 0.33
    ramp_rise_fraction: float = 0.15
    ramp_power: float = 12.0
    keypoint_jitter_torso: float = 0.01
    keypoint_dropout: float = 0.05
    pace_amplitude_torso: float = 0.8
    flail_amplitude_torso: float = 0.5


@dataclass
class ScenarioSpec:
    duration_s: float = 7200.0
    episodes: List[Episode] = field(
        default_factory=lambda: [
            Episode(1800.0, 120.0, motion_style="pacing"),
            Episode(4800.0, 600.0, motion_style="flailing"),
        ]
    )
    effects: EffectConfig = field(default_factory=EffectConfig)
    seed: int = 0
    session_id: str = "synth-session"
    participant_id: str = "synth-participant"
    t0_ms: int = 0
    acc_hz: int = 32
    bvp_hz: int = 64
    eda_hz: int = 4
    temp_hz: int = 1
    hr_hz: int = 1
    keypoint_hz: int = 5

    def __post_init__(self) -> None:
        spans = []
        for ep in self.episodes:
            lo = ep.agitation_start_s - ep.preagitation_lead_s
            hi = ep.agitation_start_s + ep.agitation_len_s
            if lo < 0 or hi > self.duration_s:
                raise ValidationError("episode (with lead) outside session span")
            spans.append((lo, hi))
        spans.sort()
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValidationError("episodes overlap (leads included)")

    def truth(self) -> List[LabelInterval]:
        out = []
        for ep in self.episodes:
            start = int(round(ep.agitation_start_s * 1000)) + self.t0_ms
            end = start + int(round(ep.agitation_len_s * 1000))
            if ep.preagitation_lead_s > 0:
                lead = int(round(ep.preagitation_lead_s * 1000))
                out.append(
                    LabelInterval(
                        start - lead, start, LabelClass.PRE_AGITATION, LabelSource.SYNTH_TRUTH
                    )
                )
            out.append(LabelInterval(start, end, LabelClass.AGITATION, LabelSource.SYNTH_TRUTH))
        return sorted(out, key=lambda iv: iv.start)


@dataclass
class SynthSession(Session):
    truth: List[LabelInterval] = field(default_factory=list)


def default_spec(duration_s: float = 7200.0, seed: int = 0) -> ScenarioSpec:
    """The stock two-episode scenario, scaled down for short durations."""
    if duration_s >= 7200.0:
        return ScenarioSpec(duration_s=duration_s, seed=seed)
    if duration_s < 120.0:
        raise ValidationError("default scenario needs at least 120 s")
    lead = min(360.0, 0.2 * duration_s)
    ep1 = Episode(
        agitation_start_s=max(lead, 0.25 * duration_s),
        agitation_len_s=min(120.0, 0.1 * duration_s),
        preagitation_lead_s=lead,
        motion_style="pacing",
    )
    ep2 = Episode(
        agitation_start_s=0.68 * duration_s,
        agitation_len_s=min(600.0, 0.15 * duration_s),
        preagitation_lead_s=lead,
        motion_style="flailing",
    )
    return ScenarioSpec(duration_s=duration_s, episodes=[ep1, ep2], seed=seed)


def _regime(spec: ScenarioSpec, t: np.ndarray) -> np.ndarray:
    """Monotone ramp 0->1 across each lead window, 1 inside agitation.

    Two-phase shape: an early step to ``ramp_plateau`` (visible change right
    at lead start) plus a high-power tail that only approaches agitation
    levels in the final stretch before onset.
    """
    eff = spec.effects
    r = np.zeros_like(t)
    for ep in spec.episodes:
        start = ep.agitation_start_s
        end = start + ep.agitation_len_s
        if ep.preagitation_lead_s > 0:
            lead0 = start - ep.preagitation_lead_s
            in_lead = (t >= lead0) & (t < start)
            p = (t[in_lead] - lead0) / ep.preagitation_lead_s
            early = np.minimum(1.0, p / max(eff.ramp_rise_fraction, 1e-9))
            r[in_lead] = eff.ramp_plateau * early + (1.0 - eff.ramp_plateau) * p**eff.ramp_power
        r[(t >= start) & (t < end)] = 1.0
    return r


def _agitated(spec: ScenarioSpec, t: np.ndarray) -> np.ndarray:
    a = np.zeros_like(t, dtype=bool)
    for ep in spec.episodes:
        a |= (t >= ep.agitation_start_s) & (t < ep.agitation_start_s + ep.agitation_len_s)
    return a


def _slow_wander(rng: np.random.Generator, n: int, rate_hz: float, period_s: float) -> np.ndarray:
    """Smooth pseudo-random drift: a few random sinusoids around period_s."""
    t = np.arange(n) / rate_hz
    out = np.zeros(n)
    for _ in range(3):
        period = period_s * rng.uniform(0.6, 1.6)
        phase = rng.uniform(0, 2 * math.pi)
        out += np.sin(2 * math.pi * t / period + phase)
    return out / 3.0


def _burst_train(
    rng: np.random.Generator,
    t: np.ndarray,
    rate_hz: float,
    per_min: np.ndarray,
    amp: np.ndarray,
    burst_len_s: float = 0.5,
    freq_hz: float = 3.0,
) -> np.ndarray:
    """Oscillatory motion packets with a time-varying Poisson rate."""
    n = len(t)
    out = np.zeros(n)
    p_start = per_min / 60.0 / rate_hz
    starts = np.nonzero(rng.random(n) < p_start)[0]
    width = max(1, int(round(burst_len_s * rate_hz)))
    for s in starts:
        e = min(n, s + width)
        local = np.arange(e - s) / rate_hz
        envelope = np.sin(math.pi * np.arange(e - s) / (e - s)) if e > s else 0.0
        phase = rng.uniform(0, 2 * math.pi)
        out[s:e] += amp[s] * envelope * np.sin(2 * math.pi * freq_hz * local + phase)
    return out


_SKELETON_TEMPLATE = np.array(
    [
        (0.00, -0.30),  # nose
        (0.00, 0.00),  # neck
        (-0.20, 0.05),  # right shoulder
        (-0.30, 0.45),  # right elbow
        (-0.35, 0.85),  # right wrist
        (0.20, 0.05),  # left shoulder
        (0.30, 0.45),  # left elbow
        (0.35, 0.85),  # left wrist
        (-0.15, 1.00),  # right hip
        (-0.17, 1.60),  # right knee
        (-0.18, 2.20),  # right ankle
        (0.15, 1.00),  # left hip
        (0.17, 1.60),  # left knee
        (0.18, 2.20),  # left ankle
        (-0.05, -0.35),  # right eye
        (0.05, -0.35),  # left eye
        (-0.10, -0.30),  # right ear
        (0.10, -0.30),  # left ear
    ]
)

_ARMS = (3, 4, 6, 7)
_LEGS = (9, 10, 12, 13)


def motion_frames(
    style: str,
    duration_s: float,
    seed: int = 0,
    step_hz: float = 5.0,
    intensity: Optional[np.ndarray] = None,
    effects: Optional[EffectConfig] = None,
    t0_ms: int = 0,
    person_id: str = "p1",
    torso_px: float = 100.0,
    center_px: Tuple[float, float] = (320.0, 240.0),
) -> List[KeypointFrame]:
    """Keypoint stream for one motion style; intensity in [0,1] per frame
    blends idle jitter into the style's full motion."""
    if style not in MOTION_STYLES:
        raise ValidationError(f"unknown motion style: {style}")
    eff = effects or EffectConfig()
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * step_hz))
    t = np.arange(n) / step_hz
    level = np.ones(n) if intensity is None else np.asarray(intensity, dtype=np.float64)
    if style == "idle":
        level = np.zeros(n)

    frames: List[KeypointFrame] = []
    sway_phase = rng.uniform(0, 2 * math.pi)
    limb_phases = rng.uniform(0, 2 * math.pi, size=N_KEYPOINTS)
    limb_freqs = rng.uniform(2.0, 3.0, size=N_KEYPOINTS)
    pace_period = rng.uniform(3.5, 4.5)
    for k in range(n):
        pts = _SKELETON_TEMPLATE.copy()
        # gentle idle sway everyone has
        pts[:, 0] += 0.02 * math.sin(2 * math.pi * t[k] / 11.0 + sway_phase)
        lv = float(level[k])
        if style == "pacing" and lv > 0:
            shift = lv * eff.pace_amplitude_torso * math.sin(2 * math.pi * t[k] / pace_period)
            pts[:, 0] += shift
            for j in _LEGS:
                pts[j, 0] += lv * 0.12 * math.sin(
                    2 * math.pi * 1.6 * t[k] + limb_phases[j]
                )
            for j in _ARMS:
                pts[j, 0] += lv * 0.10 * math.sin(
                    2 * math.pi * 1.6 * t[k] + limb_phases[j] + math.pi
                )
        elif style == "flailing" and lv > 0:
            for j in _ARMS:
                pts[j, 0] += lv * eff.flail_amplitude_torso * math.sin(
                    2 * math.pi * limb_freqs[j] * t[k] + limb_phases[j]
                )
                pts[j, 1] += lv * 0.6 * eff.flail_amplitude_torso * math.sin(
                    2 * math.pi * limb_freqs[j] * t[k] + limb_phases[j] + 1.1
                )
            pts[0, 0] += lv * 0.08 * math.sin(2 * math.pi * 2.2 * t[k] + limb_phases[0])
        pts += rng.normal(0.0, eff.keypoint_jitter_torso, size=pts.shape)
        px = pts * torso_px + np.asarray(center_px)
        conf = np.where(
            rng.random(N_KEYPOINTS) < eff.keypoint_dropout,
            0.0,
            rng.uniform(0.75, 0.99, size=N_KEYPOINTS),
        )
        xyc = np.column_stack([px, conf])
        frames.append(
            KeypointFrame(t=t0_ms + int(round(t[k] * 1000)), person_id=person_id, points=xyc)
        )
    return frames


def generate(spec: ScenarioSpec) -> SynthSession:
    """Build the full multimodal session described by the spec."""
    eff = spec.effects
    rng = np.random.default_rng(spec.seed)
    dur = spec.duration_s
    t0 = spec.t0_ms

    def grid(rate: int) -> np.ndarray:
        return np.arange(int(round(dur * rate))) / rate

    # HR at 1 Hz, then BVP phase-locked to it
    t_hr = grid(spec.hr_hz)
    r_hr = _regime(spec, t_hr)
    agit_hr = _agitated(spec, t_hr)
    hr = (
        eff.hr_base_bpm
        + eff.hr_drift_bpm * _slow_wander(rng, len(t_hr), spec.hr_hz, 900.0)
        + r_hr * (eff.hr_agitation_bpm - eff.hr_base_bpm)
        + rng.normal(0.0, eff.hr_noise_bpm, len(t_hr))
        + np.where(
            agit_hr,
            eff.hr_burst_bpm
            * _slow_wander(rng, len(t_hr), spec.hr_hz, 45.0)
            * rng.uniform(0.5, 1.0, len(t_hr)),
            0.0,
        )
    )
    hr = np.clip(hr, 40.0, 180.0)

    t_bvp = grid(spec.bvp_hz)
    hr_at_bvp = np.interp(t_bvp, t_hr, hr)
    phase = np.cumsum(hr_at_bvp / 60.0) / spec.bvp_hz
    bvp = np.sin(2 * math.pi * phase) + rng.normal(0.0, 0.02, len(t_bvp))

    t_eda = grid(spec.eda_hz)
    r_eda = _regime(spec, t_eda)
    tonic = (
        eff.eda_base_us
        + eff.eda_wander_us * _slow_wander(rng, len(t_eda), spec.eda_hz, 1200.0)
        + r_eda * eff.eda_agitation_us
    )
    scr_rate = eff.scr_per_min_normal + r_eda * (
        eff.scr_per_min_agitated - eff.scr_per_min_normal
    )
    scr_starts = np.nonzero(rng.random(len(t_eda)) < scr_rate / 60.0 / spec.eda_hz)[0]
    phasic = np.zeros(len(t_eda))
    kernel_len = int(8 * spec.eda_hz)
    kernel_t = np.arange(kernel_len) / spec.eda_hz
    kernel = np.exp(-kernel_t / 2.5) * (1.0 - np.exp(-kernel_t / 0.6))
    for s in scr_starts:
        amp = eff.scr_amp_us * rng.uniform(0.5, 1.5)
        e = min(len(phasic), s + kernel_len)
        phasic[s:e] += amp * kernel[: e - s]
    eda = np.clip(tonic + phasic + rng.normal(0.0, 0.01, len(t_eda)), 0.01, None)

    t_temp = grid(spec.temp_hz)
    r_temp = _regime(spec, t_temp)
    temp = (
        eff.temp_base_c
        + eff.temp_wander_c * _slow_wander(rng, len(t_temp), spec.temp_hz, 1800.0)
        + r_temp * eff.temp_agitation_c
        + rng.normal(0.0, 0.02, len(t_temp))
    )

    t_acc = grid(spec.acc_hz)
    r_acc = _regime(spec, t_acc)
    per_min = eff.bursts_per_min_normal + r_acc * (
        eff.bursts_per_min_agitated - eff.bursts_per_min_normal
    )
    amp = eff.burst_amp_normal_g + r_acc * (
        eff.burst_amp_agitated_g - eff.burst_amp_normal_g
    )
    motion_x = _burst_train(rng, t_acc, spec.acc_hz, per_min, amp, eff.burst_len_s)
    motion_y = _burst_train(rng, t_acc, spec.acc_hz, per_min * 0.8, amp * 0.8, eff.burst_len_s)
    gravity_tilt = 0.05 * _slow_wander(rng, len(t_acc), spec.acc_hz, 600.0)
    acc_x = motion_x + gravity_tilt + rng.normal(0.0, eff.acc_jitter_g, len(t_acc))
    acc_y = motion_y - gravity_tilt + rng.normal(0.0, eff.acc_jitter_g, len(t_acc))
    acc_z = (
        np.sqrt(np.clip(1.0 - np.clip(gravity_tilt, -0.5, 0.5) ** 2, 0.0, None))
        + 0.3 * _burst_train(rng, t_acc, spec.acc_hz, per_min * 0.5, amp, eff.burst_len_s)
        + rng.normal(0.0, eff.acc_jitter_g, len(t_acc))
    )

    # keypoints: per-episode style, intensity follows the regime ramp
    t_kp = grid(spec.keypoint_hz)
    r_kp = _regime(spec, t_kp)
    style_by_frame = np.zeros(len(t_kp), dtype=np.int64)  # 0 idle, 1 pacing, 2 flailing
    for ep in spec.episodes:
        lo = ep.agitation_start_s - ep.preagitation_lead_s
        hi = ep.agitation_start_s + ep.agitation_len_s
        idx = (t_kp >= lo) & (t_kp < hi)
        style_by_frame[idx] = 1 if ep.motion_style == "pacing" else 2
    kp_seed = int(rng.integers(0, 2**31))
    frames: List[KeypointFrame] = []
    for code, style in ((0, "idle"), (1, "pacing"), (2, "flailing")):
        mask = style_by_frame == code
        if not np.any(mask):
            continue
        segment = motion_frames(
            style,
            duration_s=float(np.sum(mask)) / spec.keypoint_hz,
            seed=kp_seed + code,
            step_hz=spec.keypoint_hz,
            intensity=r_kp[mask],
            effects=eff,
            t0_ms=0,
            person_id=spec.participant_id,
        )
        slots = np.nonzero(mask)[0]
        for slot, frame in zip(slots, segment):
            frames.append(
                KeypointFrame(
                    t=t0 + int(round(t_kp[slot] * 1000)),
                    person_id=frame.person_id,
                    points=frame.points,
                )
            )
    frames.sort(key=lambda f: f.t)

    def series(channel: Channel, rate: int, values: np.ndarray) -> SampleSeries:
        return SampleSeries(
            channel, Fraction(rate), t0, values, np.ones(len(values), dtype=bool)
        )

    series_map: Dict[Channel, SampleSeries] = {
        Channel.ACC_X: series(Channel.ACC_X, spec.acc_hz, acc_x),
        Channel.ACC_Y: series(Channel.ACC_Y, spec.acc_hz, acc_y),
        Channel.ACC_Z: series(Channel.ACC_Z, spec.acc_hz, acc_z),
        Channel.BVP: series(Channel.BVP, spec.bvp_hz, bvp),
        Channel.EDA: series(Channel.EDA, spec.eda_hz, eda),
        Channel.TEMP: series(Channel.TEMP, spec.temp_hz, temp),
        Channel.HR: series(Channel.HR, spec.hr_hz, hr),
    }
    from .core import acc_magnitude

    series_map[Channel.ACC_MAG] = series(
        Channel.ACC_MAG, spec.acc_hz, acc_magnitude(acc_x, acc_y, acc_z)
    )

    meta = SessionMeta(
        session_id=spec.session_id,
        participant_id=spec.participant_id,
        t0=t0,
        duration_s=dur,
    )
    return SynthSession(
        meta=meta,
        series=series_map,
        biomarkers=[],
        keypoints=frames,
        labels=spec.truth(),
        truth=spec.truth(),
    )


def write_scenario(spec: ScenarioSpec, dir_path: str) -> SynthSession:
    session = generate(spec)
    write_session(session, dir_path, truth_file=True)
    return session


@dataclass
class SelfTestReport:
    passed: bool
    failures: List[str]
    stats: Dict[str, float]

    def to_doc(self) -> dict:
        return asdict(self)


def self_test(
    spec: Optional[ScenarioSpec] = None,
    counts_rule_threshold: int = 25,
    min_recall: float = 0.9,
) -> SelfTestReport:
    """Check the generator separates regimes well enough to act as an oracle."""
    spec = spec or ScenarioSpec()
    session = generate(spec)
    records = wrist.derive_biomarkers(session.series)
    truth_agit = [iv for iv in session.truth if iv.klass == LabelClass.AGITATION]
    truth_pre = [iv for iv in session.truth if iv.klass == LabelClass.PRE_AGITATION]

    failures: List[str] = []
    stats: Dict[str, float] = {}

    def minute_class(t: int) -> str:
        for iv in truth_agit:
            if iv.overlap_ms(t, t + 60_000) >= 30_000:
                return "agitation"
        for iv in truth_pre:
            if iv.overlap_ms(t, t + 60_000) >= 30_000:
                return "pre"
        return "normal"

    by_class: Dict[str, Dict[str, List[float]]] = {
        k: {"hr": [], "counts": [], "scl": []} for k in ("normal", "pre", "agitation")
    }
    for rec in records:
        klass = minute_class(rec.t)
        if rec.pulse_rate_bpm is not None:
            by_class[klass]["hr"].append(rec.pulse_rate_bpm)
        if rec.activity_counts is not None:
            by_class[klass]["counts"].append(float(rec.activity_counts))
        if rec.scl_us is not None:
            by_class[klass]["scl"].append(rec.scl_us)

    for name in ("hr", "counts", "scl"):
        normal = np.asarray(by_class["normal"][name])
        agit = np.asarray(by_class["agitation"][name])
        if len(normal) == 0 or len(agit) == 0:
            failures.append(f"{name}: missing data for a regime")
            continue
        gap = float(np.mean(agit) - np.mean(normal))
        sd = float(np.std(normal))
        stats[f"{name}_gap"] = gap
        stats[f"{name}_normal_sd"] = sd
        if gap < sd:
            failures.append(
                f"{name}: agitation-normal gap {gap:.3f} below 1 normal sd {sd:.3f}"
            )

    detected = 0
    for iv in truth_agit:
        hit = any(
            (rec.activity_counts or 0) > counts_rule_threshold
            and iv.overlap_ms(rec.t, rec.t + 60_000) > 0
            for rec in records
        )
        detected += int(hit)
    recall = detected / len(truth_agit) if truth_agit else 1.0
    stats["counts_rule_recall"] = recall
    if recall < min_recall:
        failures.append(
            f"activity-count rule recall {recall:.2f} below {min_recall:.2f}"
        )

    # flailing motion must move more than idle by construction
    idle_rows = pose.extract_feature_rows(
        motion_frames("idle", 60.0, seed=spec.seed + 1, effects=spec.effects)
    )
    flail_rows = pose.extract_feature_rows(
        motion_frames("flailing", 60.0, seed=spec.seed + 2, effects=spec.effects)
    )
    eu = slice(0, len(pose.BODY_INDICES))
    idle_eu = float(np.mean([r.values[eu] for r in idle_rows if r.valid]))
    flail_eu = float(np.mean([r.values[eu] for r in flail_rows if r.valid]))
    stats["idle_mean_eu"] = idle_eu
    stats["flail_mean_eu"] = flail_eu
    if not flail_eu > idle_eu:
        failures.append(
            f"flailing mean displacement {flail_eu:.4f} not above idle {idle_eu:.4f}"
        )

    return SelfTestReport(passed=not failures, failures=failures, stats=stats)
