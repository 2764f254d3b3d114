import numpy as np
import pytest

from agitrack.core import LabelClass, LabelInterval, LabelSource, ValidationError
from agitrack.ingest import KeypointFrame
from agitrack.pose import (
    BODY_INDICES,
    CorrelationPruner,
    N_POSE_FEATURES,
    POSE_FEATURE_NAMES,
    build_sequences,
    extract_feature_rows,
    extract_pose_features,
    normalize_skeleton,
    prune_by_class_correlation,
)
from agitrack.synthgen import motion_frames


def frame_from_points(points_xy, t=0, conf=None, person="p"):
    points_xy = np.asarray(points_xy, float)
    conf = np.full(18, 0.9) if conf is None else np.asarray(conf, float)
    return KeypointFrame(t=t, person_id=person, points=np.column_stack([points_xy, conf]))


def base_pose(shift=(0.0, 0.0), scale=1.0):
    rng = np.random.default_rng(42)
    pts = rng.uniform(0, 100, size=(18, 2))
    pts[1] = (50, 40)  # neck
    pts[8] = (45, 90)  # right hip
    pts[11] = (55, 90)  # left hip
    return pts * scale + np.asarray(shift)


class TestNormalization:
    def test_scale_invariance(self):
        f1 = normalize_skeleton(frame_from_points(base_pose()))
        f2 = normalize_skeleton(frame_from_points(base_pose(scale=2.0)))
        assert np.allclose(f1.points, f2.points, atol=1e-9)

    def test_translation_invariance(self):
        f1 = normalize_skeleton(frame_from_points(base_pose()))
        f2 = normalize_skeleton(frame_from_points(base_pose(shift=(50, 30))))
        assert np.allclose(f1.points, f2.points, atol=1e-9)

    def test_neck_carry_forward(self):
        f1 = normalize_skeleton(frame_from_points(base_pose(), t=0))
        conf = np.full(18, 0.9)
        conf[1] = 0.0  # neck missing in frame 2
        f2 = normalize_skeleton(frame_from_points(base_pose(), t=200, conf=conf), f1)
        assert f2.valid
        assert f2.carried[1]
        assert np.allclose(f2.raw_neck, f1.raw_neck)

    def test_invalid_without_anchors(self):
        conf = np.full(18, 0.9)
        conf[[1]] = 0.0
        out = normalize_skeleton(frame_from_points(base_pose(), conf=conf))
        assert not out.valid

    def test_low_confidence_point_carries_normalized_position(self):
        f1 = normalize_skeleton(frame_from_points(base_pose(), t=0))
        pts = base_pose()
        pts[4] = (999.0, 999.0)  # garbage coords, zero confidence
        conf = np.full(18, 0.9)
        conf[4] = 0.0
        f2 = normalize_skeleton(frame_from_points(pts, t=200, conf=conf), f1)
        assert f2.carried[4]
        assert np.allclose(f2.points[4], f1.points[4])


class TestPoseFeatures:
    def test_identical_frames_zero_displacement(self):
        f1 = normalize_skeleton(frame_from_points(base_pose(), t=0))
        f2 = normalize_skeleton(frame_from_points(base_pose(), t=200), f1)
        row = extract_pose_features(f2, f1)
        assert row.valid
        eu = row.values[: len(BODY_INDICES)]
        assert np.allclose(eu, 0.0, atol=1e-12)

    def test_345_triangle_distance(self):
        pts = base_pose()
        f1 = normalize_skeleton(frame_from_points(pts, t=0))
        # p3 at normalized (3,4) relative to neck: scale is neck-midhip distance
        scale = np.linalg.norm(pts[1] - (pts[8] + pts[11]) / 2)
        pts2 = pts.copy()
        pts2[3] = pts[1] + np.array([3.0, 4.0]) * scale
        f2 = normalize_skeleton(frame_from_points(pts2, t=200), f1)
        row = extract_pose_features(f2, f1)
        idx = POSE_FEATURE_NAMES.index("eu_1_3")
        assert row.values[idx] == pytest.approx(5.0, rel=1e-9)

    def test_angle_convention(self):
        pts = base_pose()
        scale = np.linalg.norm(pts[1] - (pts[8] + pts[11]) / 2)
        below = pts.copy()
        below[2] = pts[1] + np.array([0.0, 1.0]) * scale  # straight down in image
        right = pts.copy()
        right[2] = pts[1] + np.array([1.0, 0.0]) * scale  # straight right
        prev = normalize_skeleton(frame_from_points(pts, t=0))
        ang_idx = POSE_FEATURE_NAMES.index("ang_1_2")
        row_b = extract_pose_features(
            normalize_skeleton(frame_from_points(below, t=200), prev), prev
        )
        row_r = extract_pose_features(
            normalize_skeleton(frame_from_points(right, t=400), prev), prev
        )
        assert row_b.values[ang_idx] == pytest.approx(0.0, abs=1e-9)
        assert row_r.values[ang_idx] == pytest.approx(np.pi / 2, rel=1e-9)

    def test_full_pipeline_scale_translation_invariance(self):
        rng = np.random.default_rng(3)
        base_frames = motion_frames("flailing", 10.0, seed=9)
        k = 3.7
        shift = np.array([123.0, -45.0])
        moved = [
            KeypointFrame(
                t=f.t,
                person_id=f.person_id,
                points=np.column_stack([f.points[:, :2] * k + shift, f.points[:, 2]]),
            )
            for f in base_frames
        ]
        rows_a = extract_feature_rows(base_frames)
        rows_b = extract_feature_rows(moved)
        for ra, rb in zip(rows_a, rows_b):
            assert ra.valid == rb.valid
            assert np.allclose(ra.values, rb.values, atol=1e-9)

    def test_time_reversal_eu_symmetric(self):
        f1 = normalize_skeleton(frame_from_points(base_pose(), t=0))
        pts2 = base_pose()
        pts2[4] += (7.0, 7.0)
        f2 = normalize_skeleton(frame_from_points(pts2, t=200), f1)
        fwd = extract_pose_features(f2, f1)
        rev = extract_pose_features(f1, f2)
        n_eu = len(BODY_INDICES)
        assert np.allclose(fwd.values[:n_eu], rev.values[:n_eu], atol=1e-9)

    def test_por_equals_neck_distance_when_torso_unit(self):
        f1 = normalize_skeleton(frame_from_points(base_pose(), t=0))
        f2 = normalize_skeleton(frame_from_points(base_pose(), t=200), f1)
        row = extract_pose_features(f2, f1)
        for j in range(3, 15):
            eu = row.values[POSE_FEATURE_NAMES.index(f"eu_1_{j}")]
            por = row.values[POSE_FEATURE_NAMES.index(f"por_{j}_1")]
            assert por == pytest.approx(eu, rel=1e-9)

    def test_invalid_frame_zero_row(self):
        conf = np.zeros(18)
        bad = normalize_skeleton(frame_from_points(base_pose(), conf=conf))
        row = extract_pose_features(bad, None)
        assert not row.valid
        assert np.all(row.values == 0.0)

    def test_carried_point_zeroes_eu(self):
        f1 = normalize_skeleton(frame_from_points(base_pose(), t=0))
        pts = base_pose()
        pts[4] += (50, 50)
        conf = np.full(18, 0.9)
        conf[4] = 0.0
        f2 = normalize_skeleton(frame_from_points(pts, t=200, conf=conf), f1)
        row = extract_pose_features(f2, f1)
        eu4 = row.values[POSE_FEATURE_NAMES.index("eu_4")]
        assert row.valid
        assert eu4 == 0.0


class TestBuildSequences:
    def make_rows(self, seconds=100, step_hz=5):
        frames = motion_frames("idle", seconds, seed=1, step_hz=step_hz)
        return extract_feature_rows(frames)

    def test_count_formula(self):
        rows = self.make_rows(100)
        seqs = build_sequences(rows, [], window_s=30, stride_s=1, step_hz=5)
        assert len(seqs) == 71
        assert all(s.steps.shape == (150, N_POSE_FEATURES) for s in seqs)

    def test_all_inside_interval_positive(self):
        rows = self.make_rows(50)
        labels = [LabelInterval(0, 50_000, LabelClass.AGITATION, LabelSource.SYNTH_TRUTH)]
        seqs = build_sequences(rows, labels)
        assert len(seqs) > 0
        assert all(s.label == 1 for s in seqs)

    def test_half_window_overlap_positive(self):
        rows = self.make_rows(60)
        # covers exactly half of the window starting at 0: [0, 15 s)
        labels = [LabelInterval(0, 15_000, LabelClass.AGITATION, LabelSource.SYNTH_TRUTH)]
        seqs = build_sequences(rows, labels)
        assert seqs[0].label == 1
        assert seqs[20].label == 0

    def test_too_few_rows_empty(self):
        rows = self.make_rows(10)
        assert build_sequences(rows, [], window_s=30) == []

    def test_invalid_fraction_discard(self):
        rows = self.make_rows(60)
        broken = []
        for i, r in enumerate(rows):
            if i % 3 == 0:  # >20% invalid everywhere
                broken.append(type(r)(t=r.t, values=r.values, valid=False))
            else:
                broken.append(r)
        assert build_sequences(broken, []) == []

    def test_step_rate_above_source_rejected(self):
        rows = self.make_rows(40, step_hz=5)
        with pytest.raises(ValidationError):
            build_sequences(rows, [], step_hz=10)


class TestPrune:
    def rows_for(self, seed, n=600, d=6):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(n, d))

    def test_exact_duplicate_removed_once(self):
        names = [f"c{i}" for i in range(5)]
        pos = self.rows_for(1, d=5)
        neg = self.rows_for(2, d=5)
        pos[:, 3] = pos[:, 0]
        neg[:, 3] = neg[:, 0]
        report = prune_by_class_correlation(pos, neg, 0.8, names=names)
        assert report.removed == ["c3"]
        assert "c0" in report.kept

    def test_single_class_correlation_kept(self):
        names = [f"c{i}" for i in range(4)]
        pos = self.rows_for(3, d=4)
        neg = self.rows_for(4, d=4)
        pos[:, 2] = pos[:, 1] + 0.05 * self.rows_for(5, d=4)[:, 2]  # r≈0.99 in pos only
        report = prune_by_class_correlation(pos, neg, 0.8, names=names)
        assert report.removed == []

    def test_zero_variance_never_pruned(self):
        names = [f"c{i}" for i in range(3)]
        pos = self.rows_for(6, d=3)
        neg = self.rows_for(7, d=3)
        pos[:, 1] = 5.0
        neg[:, 1] = 5.0
        report = prune_by_class_correlation(pos, neg, 0.5, names=names)
        assert "c1" in report.kept

    def test_matrices_symmetric_unit_diagonal(self):
        pos = self.rows_for(8)
        neg = self.rows_for(9)
        report = prune_by_class_correlation(pos, neg, 0.8, names=[f"c{i}" for i in range(6)])
        for m in (report.corr_pos, report.corr_neg):
            assert np.allclose(m, m.T)
            assert np.allclose(np.diag(m), 1.0)
            assert m.min() >= 0.0 and m.max() <= 1.0

    def test_order_independence_within_class(self):
        rng = np.random.default_rng(10)
        pos = self.rows_for(11)
        neg = self.rows_for(12)
        names = [f"c{i}" for i in range(6)]
        a = prune_by_class_correlation(pos, neg, 0.8, names=names)
        b = prune_by_class_correlation(
            pos[rng.permutation(len(pos))], neg[rng.permutation(len(neg))], 0.8, names=names
        )
        assert a.kept == b.kept

    def test_estimator_wrapper_transform(self):
        pos = self.rows_for(13, d=4)
        neg = self.rows_for(14, d=4)
        pos[:, 3] = pos[:, 0]
        neg[:, 3] = neg[:, 0]
        X = np.vstack([pos, neg])
        y = np.array([1] * len(pos) + [0] * len(neg))
        pruner = CorrelationPruner(threshold=0.8).fit(X, y, names=[f"c{i}" for i in range(4)])
        out = pruner.transform(X)
        assert out.shape[1] == 3

    def test_kept_plus_removed_is_all(self):
        pos = self.rows_for(15)
        neg = self.rows_for(16)
        names = [f"c{i}" for i in range(6)]
        report = prune_by_class_correlation(pos, neg, 0.9, names=names)
        assert sorted(report.kept + report.removed) == sorted(names)


def test_multi_person_stream_requires_selection():
    frames_a = motion_frames("idle", 5, seed=1, person_id="alice")
    frames_b = motion_frames("idle", 5, seed=2, person_id="bob")
    mixed = sorted(frames_a + frames_b, key=lambda f: (f.t, f.person_id))
    with pytest.raises(ValidationError, match="alice, bob"):
        extract_feature_rows(mixed)
    rows = extract_feature_rows(mixed, person_id="alice")
    assert len(rows) == len(frames_a)
