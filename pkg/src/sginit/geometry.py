"""SE(3) poses, pinhole projection, and reprojection-induced optical flow.

Conventions used throughout the package:

* Poses are world-to-camera maps stored as unit quaternion (w, x, y, z)
  plus translation in meters.  ``compose(a, b)`` applies ``b`` first, so the
  relative transform taking camera-i coordinates into camera-j coordinates is
  ``compose(g_j, inverse(g_i))``.
* Twists are ordered (rotational part, translational part); the retraction is
  right multiplication, ``g <- compose(g, se3_exp(xi))``.
* Integer pixel coordinates address pixel centers; the grid covers exactly
  [0, width) x [0, height) with no half-pixel offset.
* Flow fields store absolute target coordinates (the warped position of each
  source pixel), not displacements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    ConfigError,
    DomainError,
    InvalidDepthError,
    ParseError,
    ShapeError,
)

_SMALL_ANGLE = 1e-6
_MIN_FLOW_DEPTH = 1e-8


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Twist:
    """Tangent-space element: rotation (rad) and translation (m) 3-vectors."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if not (np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise DomainError("twist components must be finite")

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.rotation))


@dataclass(frozen=True)
class Pose:
    """Rigid transform; quaternion (w, x, y, z) normalized on construction."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.isfinite(q).all() and np.isfinite(t).all()):
            raise DomainError("pose components must be finite")
        n = float(np.linalg.norm(q))
        if n < 1e-12:
            raise DomainError("quaternion norm is zero")
        if abs(n - 1.0) > 1e-9:
            q = q / n
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.quaternion
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or an array of points (..., 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation_matrix().T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def compose(a: Pose, b: Pose) -> Pose:
    """Group product a∘b: apply b first, then a."""
    return Pose(_quat_multiply(a.quaternion, b.quaternion), a.apply(b.translation))


def inverse(a: Pose) -> Pose:
    w, x, y, z = a.quaternion
    q_inv = np.array([w, -x, -y, -z])
    r_inv = a.rotation_matrix().T
    return Pose(q_inv, -(r_inv @ a.translation))


def relative(g_i: Pose, g_j: Pose) -> Pose:
    """Transform taking camera-i coordinates into camera-j coordinates."""
    return compose(g_j, inverse(g_i))


def se3_exp(xi: Twist) -> Pose:
    """Closed-form exponential map; rotation via Rodrigues, translation via
    the left Jacobian.  Total function; second-order series below 1e-6 rad."""
    omega = xi.rotation
    v = xi.translation
    theta = float(np.linalg.norm(omega))
    theta2 = theta * theta
    if theta < _SMALL_ANGLE:
        half_sinc = 0.5 - theta2 / 48.0  # sin(t/2)/t
        a = 0.5 - theta2 / 24.0          # (1-cos t)/t^2
        b = 1.0 / 6.0 - theta2 / 120.0   # (t-sin t)/t^3
        q = np.concatenate([[math.cos(theta / 2.0)], omega * half_sinc])
    else:
        a = (1.0 - math.cos(theta)) / theta2
        b = (theta - math.sin(theta)) / (theta2 * theta)
        q = np.concatenate([[math.cos(theta / 2.0)], omega * (math.sin(theta / 2.0) / theta)])
    k = _skew(omega)
    v_mat = np.eye(3) + a * k + b * (k @ k)
    return Pose(q, v_mat @ v)


def se3_log(g: Pose) -> Twist:
    """Inverse of se3_exp on the principal branch (rotation angle < pi)."""
    q = g.quaternion
    if q[0] < 0:
        q = -q
    s = float(np.linalg.norm(q[1:]))
    theta = 2.0 * math.atan2(s, q[0])
    if theta >= math.pi - 2e-6:
        raise DomainError(f"rotation angle {theta:.9f} rad too close to pi for se3_log")
    theta2 = theta * theta
    if theta < _SMALL_ANGLE:
        omega = q[1:] * (2.0 + theta2 / 12.0)
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        omega = q[1:] * (theta / math.sin(theta / 2.0))
        c = (1.0 - (theta * math.sin(theta)) / (2.0 * (1.0 - math.cos(theta)))) / theta2
    k = _skew(omega)
    v_inv = np.eye(3) - 0.5 * k + c * (k @ k)
    return Twist(omega, v_inv @ g.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def parse_intrinsics(text: str) -> CameraIntrinsics:
    """Parse 'fx fy cx cy width height' with '#' comments."""
    tokens: list[str] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if len(tokens) != 6:
        raise ParseError(f"intrinsics need 6 fields, got {len(tokens)}")
    try:
        fx, fy, cx, cy = (float(t) for t in tokens[:4])
        width, height = (int(t) for t in tokens[4:])
    except ValueError as exc:
        raise ParseError(f"non-numeric intrinsics token: {exc}") from exc
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path, "r", encoding="ascii") as fh:
        return parse_intrinsics(fh.read())


def write_intrinsics(path, k: CameraIntrinsics) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g} {k.width} {k.height}\n")


def pixel_grid(k: CameraIntrinsics) -> np.ndarray:
    """(H, W, 2) array of (u, v) pixel-center coordinates."""
    u, v = np.meshgrid(np.arange(k.width, dtype=float), np.arange(k.height, dtype=float))
    return np.stack([u, v], axis=-1)


def backproject_rays(k: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) unit-depth rays ((u-cx)/fx, (v-cy)/fy, 1)."""
    grid = pixel_grid(k)
    return np.stack(
        [
            (grid[..., 0] - k.cx) / k.fx,
            (grid[..., 1] - k.cy) / k.fy,
            np.ones(k.shape),
        ],
        axis=-1,
    )


@dataclass(frozen=True)
class InverseDepthMap:
    """Per-pixel inverse depth (1/m) with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or valid.shape != values.shape:
            raise ShapeError("inverse depth values and mask must be matching 2-D arrays")
        bad = valid & ~(np.isfinite(values) & (values > 0))
        if bad.any():
            raise InvalidDepthError("valid inverse depths must be finite and positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_depth(cls, depth: np.ndarray) -> "InverseDepthMap":
        depth = np.asarray(depth, dtype=float)
        valid = np.isfinite(depth) & (depth > 0)
        values = np.where(valid, 1.0 / np.where(valid, depth, 1.0), 0.0)
        return cls(values, valid)

    def to_depth(self) -> np.ndarray:
        """Depth in meters; invalid pixels are 0."""
        return np.where(self.valid, 1.0 / np.where(self.valid, self.values, 1.0), 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FlowField:
    """Absolute target coordinates per source pixel, with validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 3 or values.shape[2] != 2 or valid.shape != values.shape[:2]:
            raise ShapeError("flow values must be (H, W, 2) with an (H, W) mask")
        if not np.isfinite(values[valid]).all():
            raise ShapeError("valid flow entries must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    def displacement(self, k: CameraIntrinsics) -> np.ndarray:
        return self.values - pixel_grid(k)


def project(k: CameraIntrinsics, point) -> np.ndarray:
    point = np.asarray(point, dtype=float).reshape(3)
    if point[2] <= 0:
        raise BehindCameraError(f"cannot project point with depth {point[2]}")
    return np.array(
        [k.fx * point[0] / point[2] + k.cx, k.fy * point[1] / point[2] + k.cy]
    )


def backproject(k: CameraIntrinsics, pixel, inv_depth: float) -> np.ndarray:
    if not (np.isfinite(inv_depth) and inv_depth > 0):
        raise InvalidDepthError(f"inverse depth must be positive, got {inv_depth}")
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    return np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]) / inv_depth


def reproject_flow(k: CameraIntrinsics, g_ij: Pose, d_i: InverseDepthMap) -> FlowField:
    """Warp the pixel grid of frame i into frame j: backproject with d_i,
    transform by g_ij, project.  Mask is false where the source depth is
    invalid, the transformed depth is <= 1e-8, or the target falls outside
    [0, width) x [0, height)."""
    if d_i.shape != k.shape:
        raise ShapeError(f"depth map shape {d_i.shape} does not match intrinsics {k.shape}")
    rays = backproject_rays(k)
    safe_d = np.where(d_i.valid, d_i.values, 1.0)
    points_i = rays / safe_d[..., None]
    points_j = points_i @ g_ij.rotation_matrix().T + g_ij.translation
    z = points_j[..., 2]
    in_front = z > _MIN_FLOW_DEPTH
    safe_z = np.where(in_front, z, 1.0)
    u = k.fx * points_j[..., 0] / safe_z + k.cx
    v = k.fy * points_j[..., 1] / safe_z + k.cy
    values = np.where((d_i.valid & in_front)[..., None], np.stack([u, v], axis=-1), 0.0)
    in_bounds = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    valid = d_i.valid & in_front & in_bounds
    return FlowField(values, valid)
