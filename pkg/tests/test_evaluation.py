import numpy as np
import pytest

from sginit.errors import DegenerateAlignmentError, NoOverlapError, ShapeError
from sginit.evaluation import (
    DepthMetrics,
    FailureReport,
    SimilarityTransform,
    Trajectory,
    associate,
    ate,
    classify_failure,
    depth_metrics,
    umeyama_align,
)
from sginit.geometry import Pose, Twist, se3_exp


def random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return se3_exp(Twist(axis * rng.uniform(0.1, 2.5), np.zeros(3))).rotation_matrix()


def random_trajectory(rng, n=12, spread=3.0):
    stamps = np.arange(n, dtype=float)
    poses = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        poses.append(
            se3_exp(Twist(axis * rng.uniform(0, 1.0), rng.normal(scale=spread, size=3)))
        )
    return Trajectory(stamps, tuple(poses))


def transform_trajectory(traj, s, r, t):
    poses = []
    for p in traj.poses:
        new_t = s * r @ p.translation + t
        poses.append(Pose(p.quaternion, new_t))
    return Trajectory(traj.timestamps, tuple(poses))


class TestUmeyama:
    def test_identity_on_equal_inputs(self):
        rng = np.random.default_rng(0)
        traj = random_trajectory(rng)
        got = umeyama_align(traj, traj, "similarity")
        assert abs(got.scale - 1.0) < 1e-12
        assert np.abs(got.rotation - np.eye(3)).max() < 1e-9
        assert np.abs(got.translation).max() < 1e-9

    def test_recovers_random_sim3(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            pred = random_trajectory(rng)
            s = 2.5
            r = random_rotation(rng)
            t = rng.normal(size=3)
            gt = transform_trajectory(pred, s, r, t)
            got = umeyama_align(pred, gt, "similarity")
            residual = got.apply(pred.translations()) - gt.translations()
            assert np.linalg.norm(residual, axis=1).max() < 1e-9

    def test_rigid_recovers_rotation_translation(self):
        rng = np.random.default_rng(20)
        pred = random_trajectory(rng)
        gt = transform_trajectory(pred, 1.0, random_rotation(rng), rng.normal(size=3))
        got = umeyama_align(pred, gt, "rigid")
        assert got.scale == 1.0
        residual = got.apply(pred.translations()) - gt.translations()
        assert np.linalg.norm(residual, axis=1).max() < 1e-9

    def test_identical_points_degenerate(self):
        stamps = np.arange(4, dtype=float)
        poses = tuple(Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, 2.0, 3.0])) for _ in range(4))
        traj = Trajectory(stamps, poses)
        with pytest.raises(DegenerateAlignmentError):
            umeyama_align(traj, traj, "similarity")

    def test_collinear_points_degenerate(self):
        stamps = np.arange(5, dtype=float)
        poses = tuple(
            Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, float(i)])) for i in range(5)
        )
        traj = Trajectory(stamps, poses)
        with pytest.raises(DegenerateAlignmentError):
            umeyama_align(traj, traj, "rigid")

    def test_optimality_against_random_candidates(self):
        rng = np.random.default_rng(2)
        pred = random_trajectory(rng, n=10)
        gt = random_trajectory(rng, n=10)
        fit = umeyama_align(pred, gt, "similarity")
        p = pred.translations()
        q = gt.translations()
        best = ((fit.apply(p) - q) ** 2).sum()
        for _ in range(10_000):
            cand = SimilarityTransform(
                rng.uniform(0.2, 3.0), random_rotation(rng), rng.normal(scale=2.0, size=3)
            )
            assert ((cand.apply(p) - q) ** 2).sum() >= best - 1e-9


class TestAte:
    def test_self_error_zero(self):
        rng = np.random.default_rng(3)
        traj = random_trajectory(rng)
        for mode in ("none", "scale_only", "rigid", "similarity"):
            assert ate(traj, traj, mode) < 1e-12

    def test_sim3_copy_zero_under_similarity(self):
        rng = np.random.default_rng(4)
        pred = random_trajectory(rng)
        gt = transform_trajectory(pred, 1.7, random_rotation(rng), rng.normal(size=3))
        assert ate(pred, gt, "similarity") < 1e-9

    def test_constant_offset_scale_only(self):
        # gt mean x = -1 makes the scalar least-squares fit land exactly at
        # s = 1, so the error equals the 1 m offset
        rng = np.random.default_rng(5)
        n = 8
        gt_pos = rng.normal(scale=2.0, size=(n, 3))
        gt_pos[:, 0] += -1.0 - gt_pos[:, 0].mean()
        gt_poses = tuple(Pose(np.array([1.0, 0, 0, 0]), p) for p in gt_pos)
        pred_poses = tuple(
            Pose(np.array([1.0, 0, 0, 0]), p + np.array([1.0, 0.0, 0.0])) for p in gt_pos
        )
        stamps = np.arange(n, dtype=float)
        gt = Trajectory(stamps, gt_poses)
        pred = Trajectory(stamps, pred_poses)
        # closed-form scalar fit oracle confirms s* = 1
        p = pred.translations()
        q = gt.translations()
        s_star = np.sum(p * q) / np.sum(p * p)
        assert abs(s_star - 1.0) < 1e-12
        assert abs(ate(pred, gt, "scale_only") - 1.0) < 1e-12

    def test_family_monotonicity(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            pred = random_trajectory(rng, n=10)
            gt = random_trajectory(rng, n=10)
            none = ate(pred, gt, "none")
            scale = ate(pred, gt, "scale_only")
            sim = ate(pred, gt, "similarity")
            assert sim <= scale + 1e-12
            assert scale <= none + 1e-12

    def test_alignment_family_invariance(self):
        rng = np.random.default_rng(7)
        pred = random_trajectory(rng)
        gt = random_trajectory(rng)
        base = ate(pred, gt, "similarity")
        moved = transform_trajectory(pred, 0.6, random_rotation(rng), rng.normal(size=3))
        assert abs(ate(moved, gt, "similarity") - base) < 1e-9

    def test_association_tolerance(self):
        rng = np.random.default_rng(8)
        gt = random_trajectory(rng, n=6)
        shifted = Trajectory(gt.timestamps + 1000.0, gt.poses)
        with pytest.raises(NoOverlapError):
            ate(shifted, gt, "none")

    def test_association_drops_unmatched(self):
        rng = np.random.default_rng(9)
        gt = random_trajectory(rng, n=10)
        pred = Trajectory(gt.timestamps[::2], gt.poses[::2])
        matches, dropped_pred, dropped_gt = associate(pred, gt)
        assert len(matches) == 5
        assert dropped_pred == 0 and dropped_gt == 5
        assert ate(pred, gt, "none") < 1e-12


def loop_depth_oracle(pred, gt, mask, cap):
    """Independent per-pixel loop for the four depth metrics."""
    abs_rel = []
    sq_rel = []
    sq = []
    hits = []
    for v in range(pred.shape[0]):
        for u in range(pred.shape[1]):
            g = gt[v, u]
            p = pred[v, u]
            if not mask[v, u] or not (0 < g <= cap) or not p > 0:
                continue
            abs_rel.append(abs(p - g) / g)
            sq_rel.append((p - g) ** 2 / g)
            sq.append((p - g) ** 2)
            hits.append(max(p / g, g / p) < 1.25)
    return (
        float(np.mean(abs_rel)),
        float(np.mean(sq_rel)),
        float(np.sqrt(np.mean(sq))),
        float(np.mean(hits)),
    )


class TestDepthMetrics:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(10)
        gt = rng.uniform(1.0, 50.0, size=(8, 8))
        m = depth_metrics(gt, gt, np.ones((8, 8), bool), cap=80.0)
        assert m == DepthMetrics(0.0, 0.0, 0.0, 1.0)

    def test_double_prediction(self):
        rng = np.random.default_rng(11)
        gt = rng.uniform(1.0, 30.0, size=(8, 8))
        m = depth_metrics(2 * gt, gt, np.ones((8, 8), bool), cap=80.0)
        assert abs(m.abs_rel - 1.0) < 1e-12
        assert m.delta_1_25 == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            gt = rng.uniform(0.5, 120.0, size=(10, 10))
            pred = gt * rng.uniform(0.5, 2.0, size=(10, 10))
            mask = rng.random((10, 10)) > 0.3
            cap = 80.0
            m = depth_metrics(pred, gt, mask, cap)
            ref = loop_depth_oracle(pred, gt, mask, cap)
            assert abs(m.abs_rel - ref[0]) < 1e-10
            assert abs(m.sq_rel - ref[1]) < 1e-10
            assert abs(m.rmse - ref[2]) < 1e-10
            assert abs(m.delta_1_25 - ref[3]) < 1e-10

    def test_empty_overlap(self):
        gt = np.full((4, 4), 100.0)
        with pytest.raises(NoOverlapError):
            depth_metrics(gt, gt, np.ones((4, 4), bool), cap=80.0)


class TestClassifyFailure:
    def _gt(self, positions):
        poses = tuple(Pose(np.array([1.0, 0, 0, 0]), np.asarray(p, float)) for p in positions)
        return Trajectory(np.arange(len(poses), dtype=float), poses)

    def test_success_below_threshold(self):
        report = classify_failure(0.5, self._gt([[0, 0, 0], [0, 0, 1]]))
        assert not report.is_failure

    def test_failure_above_one_meter(self):
        report = classify_failure(1.5, self._gt([[0, 0, 0], [0, 0, 1]]))
        assert report.is_failure

    def test_boundary_is_success(self):
        report = classify_failure(1.0, self._gt([[0, 0, 0], [0, 0, 1]]))
        assert not report.is_failure

    def test_static_statistics(self):
        report = classify_failure(0.1, self._gt([[1, 2, 3]] * 4))
        assert report.path_length == 0.0
        assert report.max_step_translation == 0.0
        assert not report.large_motion_flag

    def test_large_motion_flag_at_15m(self):
        report = classify_failure(0.1, self._gt([[0, 0, 0], [0, 0, 15.0]]))
        assert report.large_motion_flag
        report = classify_failure(0.1, self._gt([[0, 0, 0], [0, 0, 14.9]]))
        assert not report.large_motion_flag

    def test_path_statistics(self):
        report = classify_failure(0.1, self._gt([[0, 0, 0], [0, 0, 2.0], [0, 1.0, 2.0]]))
        assert abs(report.path_length - 3.0) < 1e-12
        assert abs(report.max_step_translation - 2.0) < 1e-12
        assert abs(report.total_forward_displacement - np.sqrt(5.0)) < 1e-12

    def test_short_gt_rejected(self):
        with pytest.raises(ShapeError):
            classify_failure(0.1, self._gt([[0, 0, 0]]))

    def test_failure_report_is_indicator(self):
        gt = self._gt([[0, 0, 0], [0, 0, 1]])
        for value in (0.0, 0.999, 1.0, 1.001, 10.0):
            report = classify_failure(value, gt)
            assert isinstance(report, FailureReport)
            assert report.is_failure == (value > 1.0)
