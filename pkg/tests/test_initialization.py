import numpy as np
import pytest

from sginit.dba import ConfidenceWeights, EdgeTarget, current_flow, edge_residual_jacobian
from sginit.errors import ConfigError
from sginit.geometry import (
    CameraIntrinsics,
    InverseDepthMap,
    Pose,
    Twist,
    compose,
    inverse,
    se3_exp,
)
from sginit.initialization import (
    InitPolicy,
    PriorBundle,
    build_keyframe_graph,
    chain_poses,
    initialize_state,
    select_keyframes,
)


def random_pose(rng, angle=0.3, trans=0.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return se3_exp(Twist(axis * rng.uniform(0, angle), rng.normal(scale=trans, size=3)))


K = CameraIntrinsics(20.0, 20.0, 11.5, 7.5, 24, 16)


def plane_priors(num_frames, relatives, depth=10.0):
    depths = tuple(
        InverseDepthMap.from_depth(np.full(K.shape, depth)) for _ in range(num_frames)
    )
    return PriorBundle(depths, tuple(relatives))


class TestChainPoses:
    def test_all_identity(self):
        poses = chain_poses([Pose.identity()] * 4, 0, Pose.identity())
        for g in poses:
            assert np.abs(g.matrix() - np.eye(4)).max() == 0.0

    def test_telescoping_translation(self):
        step = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1.0]))
        poses = chain_poses([step] * 4, 0, Pose.identity())
        for i, g in enumerate(poses):
            assert np.allclose(g.translation, [0, 0, i])

    def test_relative_recovery_oracle(self):
        rng = np.random.default_rng(0)
        for base in (0, 2, 4):
            relatives = [random_pose(rng) for _ in range(4)]
            base_pose = random_pose(rng)
            poses = chain_poses(relatives, base, base_pose)
            for i in range(4):
                recovered = compose(poses[i + 1], inverse(poses[i]))
                assert np.abs(recovered.matrix() - relatives[i].matrix()).max() < 1e-12
            assert poses[base] is base_pose

    def test_base_pose_exact(self):
        rng = np.random.default_rng(1)
        base_pose = random_pose(rng)
        poses = chain_poses([random_pose(rng)] * 3, 1, base_pose)
        assert np.array_equal(poses[1].quaternion, base_pose.quaternion)
        assert np.array_equal(poses[1].translation, base_pose.translation)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            chain_poses([], 0, Pose.identity())


def double_loop_edges(n, window):
    """Independent brute-force pair enumeration."""
    out = []
    for i in range(n):
        for j in range(n):
            if i != j and abs(i - j) <= window:
                out.append((i, j))
    return out


class TestBuildKeyframeGraph:
    def test_single_keyframe_no_edges(self):
        assert build_keyframe_graph(1, 3).edges == ()

    def test_matches_double_loop_enumeration(self):
        for n, window in [(5, 3), (2, 1), (6, 2), (8, 5)]:
            graph = build_keyframe_graph(n, window)
            assert sorted(graph.edges) == sorted(double_loop_edges(n, window))

    def test_five_keyframes_window_three_count(self):
        # brute-force enumeration: 8 + 6 + 4 directed edges
        graph = build_keyframe_graph(5, 3)
        assert len(graph.edges) == len(double_loop_edges(5, 3)) == 18

    def test_symmetric(self):
        graph = build_keyframe_graph(6, 2)
        edge_set = set(graph.edges)
        assert all((j, i) in edge_set for i, j in edge_set)


class TestSelectKeyframes:
    def test_static_sequence(self):
        priors = plane_priors(6, [Pose.identity()] * 5)
        assert select_keyframes(priors, K, 1.0) == [0, 5]

    def test_constant_velocity_every_third(self):
        # lateral translation over a fronto-parallel plane: flow accumulates
        # exactly linearly, so with threshold 2.5f every 3rd frame triggers
        step = Pose(np.array([1.0, 0, 0, 0]), np.array([-0.5, 0.0, 0.0]))
        priors = plane_priors(10, [step] * 9, depth=10.0)
        per_step = 20.0 * 0.5 / 10.0  # fx * |tx| / z = 1 px

        # brute-force mean-flow oracle per frame pair
        from sginit.initialization import chain_poses as cp, mean_prior_flow

        chained = cp(priors.relative_poses, 0, Pose.identity())
        flows = [mean_prior_flow(K, priors.depth_priors[0], chained[0], chained[t]) for t in range(1, 4)]
        assert abs(flows[0] - per_step) < 1e-9
        assert abs(flows[2] - 3 * per_step) < 1e-9

        got = select_keyframes(priors, K, 2.5 * per_step)
        assert got == [0, 3, 6, 9]

    def test_threshold_zero_takes_every_moving_frame(self):
        step = Pose(np.array([1.0, 0, 0, 0]), np.array([-0.1, 0.0, 0.0]))
        priors = plane_priors(5, [step] * 4)
        assert select_keyframes(priors, K, 0.0) == [0, 1, 2, 3, 4]


class TestInitializeState:
    def test_naive_mode(self):
        priors = plane_priors(4, [Pose.identity()] * 3)
        state = initialize_state(priors, [0, 1, 3], InitPolicy(mode="naive"), K)
        for g in state.poses:
            assert np.abs(g.matrix() - np.eye(4)).max() == 0.0
        for d in state.inv_depths:
            assert (d.values == 1.0).all() and d.valid.all()

    def test_geometry_guided_consecutive_equals_chain(self):
        rng = np.random.default_rng(2)
        relatives = [random_pose(rng, angle=0.1, trans=0.2) for _ in range(7)]
        priors = plane_priors(8, relatives)
        state = initialize_state(priors, range(8), InitPolicy(chain_limit=8), K)
        expected = chain_poses(relatives, 0, Pose.identity())
        for got, ref in zip(state.poses, expected):
            assert np.array_equal(got.quaternion, ref.quaternion)
            assert np.array_equal(got.translation, ref.translation)

    def test_constant_motion_extrapolation_telescopes(self):
        step = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 0.7]))
        priors = plane_priors(12, [step] * 11)
        state = initialize_state(
            priors, range(12), InitPolicy(chain_limit=8), K
        )
        reference = chain_poses([step] * 11, 0, Pose.identity())
        assert np.abs(state.poses[9].matrix() - reference[9].matrix()).max() < 1e-12
        assert np.abs(state.poses[11].matrix() - reference[11].matrix()).max() < 1e-12

    def test_keyframe_out_of_range(self):
        priors = plane_priors(3, [Pose.identity()] * 2)
        with pytest.raises(ConfigError):
            initialize_state(priors, [0, 5], InitPolicy(), K)

    def test_perfect_priors_give_zero_residual(self):
        # geometry-guided state from priors equal to ground truth zeroes the
        # flow residual against targets generated from the same geometry
        rng = np.random.default_rng(3)
        relatives = [random_pose(rng, angle=0.05, trans=0.15) for _ in range(4)]
        depths = tuple(
            InverseDepthMap.from_depth(rng.uniform(8.0, 12.0, size=K.shape))
            for _ in range(5)
        )
        priors = PriorBundle(depths, tuple(relatives))
        state = initialize_state(priors, range(5), InitPolicy(), K)
        graph = build_keyframe_graph(5, 2)
        for edge in graph.edges:
            flow = current_flow(state, edge)
            target = EdgeTarget(flow, ConfidenceWeights.uniform(K.shape))
            lin = edge_residual_jacobian(state, edge, target)
            assert np.abs(lin.residual).max() == 0.0

    def test_base_pose_respected(self):
        rng = np.random.default_rng(4)
        base_pose = random_pose(rng)
        depths = tuple(
            InverseDepthMap.from_depth(np.full(K.shape, 5.0)) for _ in range(4)
        )
        priors = PriorBundle(depths, tuple(random_pose(rng) for _ in range(3)), 0, base_pose)
        state = initialize_state(priors, range(4), InitPolicy(), K)
        assert np.array_equal(state.poses[0].quaternion, base_pose.quaternion)
        assert np.array_equal(state.poses[0].translation, base_pose.translation)


class TestInitPolicy:
    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            InitPolicy(mode="magic")

    def test_chain_limit_minimum(self):
        with pytest.raises(ConfigError):
            InitPolicy(chain_limit=1)
