import hashlib
import os

import numpy as np
import pytest

from agitrack.core import Channel, LabelClass, ValidationError, label_windows
from agitrack.ingest import load_session
from agitrack.synthgen import (
    EffectConfig,
    Episode,
    ScenarioSpec,
    default_spec,
    generate,
    motion_frames,
    self_test,
    write_scenario,
)
from agitrack import pose, wrist


def short_spec(seed=0):
    return ScenarioSpec(
        duration_s=1800,
        episodes=[Episode(900, 180, motion_style="flailing")],
        seed=seed,
    )


class TestSpecValidation:
    def test_truth_by_construction(self):
        spec = ScenarioSpec(duration_s=1200, episodes=[Episode(600, 180)], seed=0)
        truth = spec.truth()
        assert (truth[0].start, truth[0].end, truth[0].klass) == (
            240_000,
            600_000,
            LabelClass.PRE_AGITATION,
        )
        assert (truth[1].start, truth[1].end, truth[1].klass) == (
            600_000,
            780_000,
            LabelClass.AGITATION,
        )

    def test_overlapping_episodes_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(
                duration_s=3600,
                episodes=[Episode(1000, 600), Episode(1500, 200)],
            )

    def test_lead_outside_session_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioSpec(duration_s=1000, episodes=[Episode(100, 100)])

    def test_default_spec_scales(self):
        spec = default_spec(900, seed=1)
        assert spec.duration_s == 900
        assert len(spec.episodes) == 2


class TestGenerate:
    def test_deterministic_bytes(self, tmp_path):
        def digest(d):
            h = hashlib.sha256()
            for name in sorted(os.listdir(d)):
                with open(os.path.join(d, name), "rb") as fh:
                    h.update(name.encode())
                    h.update(fh.read())
            return h.hexdigest()

        d1, d2 = tmp_path / "a", tmp_path / "b"
        write_scenario(short_spec(5), str(d1))
        write_scenario(short_spec(5), str(d2))
        assert digest(d1) == digest(d2)
        write_scenario(short_spec(6), str(tmp_path / "c"))
        assert digest(d1) != digest(tmp_path / "c")

    def test_output_loadable_by_ingest(self, tmp_path):
        write_scenario(short_spec(), str(tmp_path / "s"))
        session = load_session(str(tmp_path / "s"))
        assert Channel.ACC_MAG in session.series
        assert session.meta.duration_s == pytest.approx(1800.0)
        assert len(session.labels) == 2

    def test_hr_gap_during_agitation(self):
        session = generate(short_spec())
        hr = session.series[Channel.HR]
        t = hr.timestamps_ms()
        agit = (t >= 900_000) & (t < 1_080_000)
        normal = t < 540_000
        assert hr.values[agit].mean() - hr.values[normal].mean() >= 15.0

    def test_truth_reproduces_schedule_via_label_windows(self):
        spec = short_spec()
        session = generate(spec)
        wl = label_windows(session.truth, 60, 60, (0, 1_800_000))
        # lead [540 s, 900 s), agitation [900 s, 1080 s)
        for w in wl:
            m = w.window_start // 60_000
            if 9 <= m < 15:
                assert w.klass == LabelClass.PRE_AGITATION
            elif 15 <= m < 18:
                assert w.klass == LabelClass.AGITATION
            else:
                assert w.klass == LabelClass.NORMAL

    def test_statistical_separation_one_sd(self):
        report = self_test(short_spec(3))
        assert report.passed, report.failures
        assert report.stats["hr_gap"] >= report.stats["hr_normal_sd"]
        assert report.stats["counts_gap"] >= report.stats["counts_normal_sd"]
        assert report.stats["scl_gap"] >= report.stats["scl_normal_sd"]

    def test_zero_effect_sizes_fail_self_test(self):
        effects = EffectConfig(
            hr_agitation_bpm=67.0,
            eda_agitation_us=0.0,
            bursts_per_min_agitated=0.6,
            burst_amp_agitated_g=0.12,
            temp_agitation_c=0.0,
            scr_per_min_agitated=1.0,
        )
        spec = ScenarioSpec(
            duration_s=1800,
            episodes=[Episode(900, 180)],
            effects=effects,
            seed=1,
        )
        report = self_test(spec)
        assert not report.passed
        assert report.failures


class TestMotionFrames:
    def test_flailing_moves_more_than_idle(self):
        idle = pose.extract_feature_rows(motion_frames("idle", 30, seed=1))
        flail = pose.extract_feature_rows(motion_frames("flailing", 30, seed=1))
        n_eu = len(pose.BODY_INDICES)
        idle_eu = np.mean([r.values[:n_eu] for r in idle if r.valid])
        flail_eu = np.mean([r.values[:n_eu] for r in flail if r.valid])
        assert flail_eu > idle_eu

    def test_pacing_translates_body(self):
        frames = motion_frames("pacing", 20, seed=2)
        necks = np.array([f.points[1, :2] for f in frames])
        assert np.ptp(necks[:, 0]) > 50  # pixels of horizontal travel

    def test_dropout_present_but_bounded(self):
        frames = motion_frames("idle", 60, seed=3)
        confs = np.concatenate([f.points[:, 2] for f in frames])
        dropped = np.mean(confs == 0.0)
        assert 0.01 < dropped < 0.12

    def test_unknown_style_rejected(self):
        with pytest.raises(ValidationError):
            motion_frames("cartwheel", 10)


def test_biomarkers_from_generated_separate_regimes():
    session = generate(short_spec(9))
    records = wrist.derive_biomarkers(session.series)
    agit = [
        r.activity_counts
        for r in records
        if 900_000 <= r.t < 1_080_000 and r.activity_counts is not None
    ]
    normal = [
        r.activity_counts
        for r in records
        if r.t < 500_000 and r.activity_counts is not None
    ]
    assert np.mean(agit) > np.mean(normal) + 30
