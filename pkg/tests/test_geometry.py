import math

import numpy as np
import pytest

from sginit.errors import (
    BehindCameraError,
    DomainError,
    InvalidDepthError,
    ParseError,
    ShapeError,
)
from sginit.geometry import (
    CameraIntrinsics,
    InverseDepthMap,
    Pose,
    Twist,
    backproject,
    compose,
    inverse,
    parse_intrinsics,
    pixel_grid,
    project,
    relative,
    reproject_flow,
    se3_exp,
    se3_log,
)


def random_pose(rng, max_angle=2.5, scale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return se3_exp(Twist(axis * angle, rng.normal(scale=scale, size=3)))


def rodrigues(omega):
    """Independent Rodrigues formula on the rotation vector."""
    theta = np.linalg.norm(omega)
    if theta == 0:
        return np.eye(3)
    k = omega / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


class TestExpLog:
    def test_zero_twist_is_identity(self):
        g = se3_exp(Twist(np.zeros(3), np.zeros(3)))
        assert np.allclose(g.quaternion, [1, 0, 0, 0])
        assert np.allclose(g.translation, 0)

    def test_pure_translation(self):
        g = se3_exp(Twist(np.zeros(3), [1.0, 2.0, 3.0]))
        assert np.allclose(g.rotation_matrix(), np.eye(3))
        assert np.allclose(g.translation, [1, 2, 3])

    def test_rotation_matches_rodrigues_oracle(self):
        omega = np.array([0.1, 0.0, 0.0])
        g = se3_exp(Twist(omega, np.zeros(3)))
        assert np.abs(g.rotation_matrix() - rodrigues(omega)).max() < 1e-12

    def test_rodrigues_oracle_random(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            omega = rng.normal(size=3)
            g = se3_exp(Twist(omega, np.zeros(3)))
            assert np.abs(g.rotation_matrix() - rodrigues(omega)).max() < 1e-12

    def test_log_identity(self):
        xi = se3_log(Pose.identity())
        assert np.allclose(xi.as_vector(), 0)

    def test_roundtrip_fixed(self):
        xi = Twist([0.2, -0.1, 0.05], [0.4, 0.0, -1.0])
        back = se3_log(se3_exp(xi))
        assert np.abs(back.as_vector() - xi.as_vector()).max() < 1e-9

    def test_roundtrip_random_1000(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            xi = Twist(axis * rng.uniform(0, 3.0), rng.normal(size=3))
            back = se3_log(se3_exp(xi))
            assert np.abs(back.as_vector() - xi.as_vector()).max() < 1e-9

    def test_small_angle_branch(self):
        rng = np.random.default_rng(3)
        for scale in (1e-7, 1e-9, 1e-12):
            xi = Twist(rng.normal(size=3) * scale, rng.normal(size=3))
            back = se3_log(se3_exp(xi))
            assert np.abs(back.as_vector() - xi.as_vector()).max() < 1e-12

    def test_log_near_pi_is_domain_error(self):
        angle = math.radians(179.9999)
        g = se3_exp(Twist([angle, 0, 0], [0, 0, 0]))
        with pytest.raises(DomainError):
            se3_log(g)


class TestGroupOps:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            g = random_pose(rng)
            e = compose(g, inverse(g))
            assert np.abs(e.rotation_matrix() - np.eye(3)).max() < 1e-9
            assert np.abs(e.translation).max() < 1e-9

    def test_identity_is_neutral(self):
        rng = np.random.default_rng(6)
        g = random_pose(rng)
        e = compose(Pose.identity(), g)
        assert np.abs(e.matrix() - g.matrix()).max() < 1e-12

    def test_associativity_vs_matrix_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a, b, c = (random_pose(rng) for _ in range(3))
            left = compose(compose(a, b), c)
            right = compose(a, compose(b, c))
            assert np.abs(left.matrix() - right.matrix()).max() < 1e-12
            # independent oracle: 4x4 homogeneous matrix product
            oracle = a.matrix() @ b.matrix() @ c.matrix()
            assert np.abs(left.matrix() - oracle).max() < 1e-12

    def test_relative_matches_matrix_oracle(self):
        rng = np.random.default_rng(9)
        gi, gj = random_pose(rng), random_pose(rng)
        oracle = gj.matrix() @ np.linalg.inv(gi.matrix())
        assert np.abs(relative(gi, gj).matrix() - oracle).max() < 1e-10

    def test_pose_normalizes_quaternion(self):
        g = Pose(np.array([2.0, 0.0, 0.0, 0.0]), np.zeros(3))
        assert abs(np.linalg.norm(g.quaternion) - 1.0) < 1e-12


class TestProjection:
    K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)

    def test_hand_evaluated_pinhole(self):
        # (100*1/10 + 50, 100*2/10 + 50)
        assert np.allclose(project(self.K, [1.0, 2.0, 10.0]), [60.0, 70.0])

    def test_principal_ray(self):
        for z in (0.1, 1.0, 57.0):
            assert np.allclose(project(self.K, [0, 0, z]), [50.0, 50.0])

    def test_zero_depth_raises(self):
        with pytest.raises(BehindCameraError):
            project(self.K, [1.0, 1.0, 0.0])

    def test_backproject_principal(self):
        p = backproject(self.K, [50.0, 50.0], 0.25)
        assert np.allclose(p, [0, 0, 4.0])

    def test_project_backproject_roundtrip(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            q = rng.uniform([0, 0], [99, 99])
            d = rng.uniform(0.01, 5.0)
            back = project(self.K, backproject(self.K, q, d))
            assert np.abs(back - q).max() < 1e-10

    def test_invalid_depth_raises(self):
        with pytest.raises(InvalidDepthError):
            backproject(self.K, [10.0, 10.0], 0.0)


def scalar_flow_oracle(k, g_ij, d):
    """Independent per-pixel loop through the scalar projection pipeline."""
    values = np.zeros((k.height, k.width, 2))
    valid = np.zeros((k.height, k.width), dtype=bool)
    r = g_ij.rotation_matrix()
    for v in range(k.height):
        for u in range(k.width):
            if not d.valid[v, u]:
                continue
            p = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]) / d.values[v, u]
            q = r @ p + g_ij.translation
            if q[2] <= 1e-8:
                continue
            uu = k.fx * q[0] / q[2] + k.cx
            vv = k.fy * q[1] / q[2] + k.cy
            values[v, u] = (uu, vv)
            valid[v, u] = (0 <= uu < k.width) and (0 <= vv < k.height)
    return values, valid


class TestReprojectFlow:
    K = CameraIntrinsics(30.0, 30.0, 12.0, 8.0, 24, 16)

    def _plane(self, depth=10.0):
        return InverseDepthMap.from_depth(np.full(self.K.shape, depth))

    def test_identity_pose_is_grid(self):
        flow = reproject_flow(self.K, Pose.identity(), self._plane())
        assert flow.valid.all()
        assert np.abs(flow.values - pixel_grid(self.K)).max() < 1e-12

    def test_forward_translation_moves_radially(self):
        g = se3_exp(Twist(np.zeros(3), [0.0, 0.0, -1.0]))
        flow = reproject_flow(self.K, g, self._plane(10.0))
        disp = flow.displacement(self.K)
        centered = pixel_grid(self.K) - np.array([self.K.cx, self.K.cy])
        radial = np.einsum("hwc,hwc->hw", disp, centered)
        off_center = np.linalg.norm(centered, axis=-1) > 1e-9
        assert (radial[flow.valid & off_center] > 0).all()

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(21)
        k = CameraIntrinsics(25.0, 28.0, 15.0, 10.0, 32, 22)
        depth = rng.uniform(4.0, 12.0, size=k.shape)
        d = InverseDepthMap.from_depth(depth)
        for _ in range(5):
            g = random_pose(rng, max_angle=0.3, scale=0.5)
            flow = reproject_flow(k, g, d)
            ref_values, ref_valid = scalar_flow_oracle(k, g, d)
            assert (flow.valid == ref_valid).all()
            assert np.abs(flow.values[flow.valid] - ref_values[flow.valid]).max() < 1e-10

    def test_behind_camera_masks(self):
        # translate far past the plane so transformed depth goes negative
        g = se3_exp(Twist(np.zeros(3), [0.0, 0.0, -11.0]))
        flow = reproject_flow(self.K, g, self._plane(10.0))
        assert not flow.valid.any()

    def test_invalid_source_depth_masks(self):
        depth = np.full(self.K.shape, 10.0)
        depth[3, 4] = -1.0
        flow = reproject_flow(self.K, Pose.identity(), InverseDepthMap.from_depth(depth))
        assert not flow.valid[3, 4]
        assert flow.valid.sum() == self.K.width * self.K.height - 1

    def test_shape_mismatch_raises(self):
        small = InverseDepthMap.from_depth(np.full((4, 4), 5.0))
        with pytest.raises(ShapeError):
            reproject_flow(self.K, Pose.identity(), small)


class TestIntrinsicsParsing:
    def test_parse_with_comment(self):
        k = parse_intrinsics("# cam0\n100 110 50 40 100 80\n")
        assert (k.fx, k.fy, k.cx, k.cy, k.width, k.height) == (100, 110, 50, 40, 100, 80)

    def test_wrong_field_count(self):
        with pytest.raises(ParseError):
            parse_intrinsics("100 110 50 40 100\n")

    def test_non_numeric(self):
        with pytest.raises(ParseError):
            parse_intrinsics("a b c d 10 10\n")
