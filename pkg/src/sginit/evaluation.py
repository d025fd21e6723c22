"""Trajectory metrics (absolute trajectory error under configurable
alignment), closed-form point-set alignment, depth accuracy metrics, and a
failure classifier with motion statistics.

Trajectories hold camera-to-world poses.  The error of frame i is the
translational part of gt_i^-1 * S * pred_i, whose norm equals the distance
between the aligned predicted position and the ground-truth position; the
reported value is the RMSE over the matched frames.

Alignment families nest (none within scale_only within similarity), and
each fit minimizes the same squared error over its family, so the metric is
monotone in the family.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAlignmentError, NoOverlapError, ShapeError
from .geometry import Pose

ALIGNMENT_MODES = ("none", "scale_only", "rigid", "similarity")

FAILURE_ATE_THRESHOLD = 1.0       # meters
LARGE_MOTION_DISPLACEMENT = 15.0  # meters
ASSOCIATION_TOLERANCE = 0.02      # seconds


@dataclass(frozen=True)
class Trajectory:
    """Timestamped camera-to-world poses; timestamps strictly increasing."""

    timestamps: np.ndarray
    poses: tuple[Pose, ...]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        poses = tuple(self.poses)
        if ts.ndim != 1 or len(ts) != len(poses) or len(poses) < 1:
            raise ShapeError("trajectory needs matching timestamps and poses, length >= 1")
        if len(ts) > 1 and not (np.diff(ts) > 0).all():
            raise ShapeError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def translations(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation


def umeyama_align(pred: Trajectory, gt: Trajectory, mode: str) -> SimilarityTransform:
    """Closed-form least-squares alignment of the predicted positions onto
    the ground truth over the chosen transform family."""
    if mode not in ALIGNMENT_MODES:
        raise ShapeError(f"unknown alignment mode {mode!r}")
    if len(pred) != len(gt):
        raise ShapeError("alignment needs trajectories of equal length")
    p = pred.translations()
    q = gt.translations()
    if mode == "none":
        return SimilarityTransform.identity()
    if mode == "scale_only":
        denom = float(np.sum(p * p))
        if denom == 0.0:
            raise DegenerateAlignmentError("all predicted positions at the origin")
        return SimilarityTransform(float(np.sum(p * q)) / denom, np.eye(3), np.zeros(3))

    if len(p) < 3:
        raise DegenerateAlignmentError("rigid/similarity alignment needs >= 3 poses")
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    pc = p - mu_p
    qc = q - mu_q
    var_p = float((pc**2).sum()) / len(p)
    if var_p == 0.0:
        raise DegenerateAlignmentError("predicted positions are all identical")
    cov = qc.T @ pc / len(p)
    u, d, vt = np.linalg.svd(cov)
    # rotation is ambiguous when the point sets are (near) collinear
    if d[1] <= 1e-9 * max(d[0], 1e-300):
        raise DegenerateAlignmentError("point set is rank-deficient; rotation ambiguous")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rotation = u @ s_fix @ vt
    scale = float(np.trace(np.diag(d) @ s_fix)) / var_p if mode == "similarity" else 1.0
    translation = mu_q - scale * rotation @ mu_p
    return SimilarityTransform(scale, rotation, translation)


def associate(
    pred: Trajectory, gt: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE
) -> tuple[list[tuple[int, int]], int, int]:
    """Unique nearest-timestamp matching within the tolerance.  Returns the
    matched index pairs plus the dropped counts (pred, gt)."""
    pairs = []
    for i, tp in enumerate(pred.timestamps):
        for j, tq in enumerate(gt.timestamps):
            dt = abs(tp - tq)
            if dt <= tolerance:
                pairs.append((dt, i, j))
    pairs.sort(key=lambda rec: (rec[0], rec[1], rec[2]))
    used_p: set[int] = set()
    used_q: set[int] = set()
    matches = []
    for _, i, j in pairs:
        if i in used_p or j in used_q:
            continue
        used_p.add(i)
        used_q.add(j)
        matches.append((i, j))
    matches.sort()
    return matches, len(pred) - len(matches), len(gt) - len(matches)


def _matched_subsets(pred: Trajectory, gt: Trajectory, tolerance: float):
    matches, _, _ = associate(pred, gt, tolerance)
    if len(matches) < 1:
        raise NoOverlapError("no timestamp matches between the trajectories")
    pi = [i for i, _ in matches]
    qi = [j for _, j in matches]
    sub_pred = Trajectory(pred.timestamps[pi], tuple(pred.poses[i] for i in pi))
    sub_gt = Trajectory(gt.timestamps[qi], tuple(gt.poses[j] for j in qi))
    return sub_pred, sub_gt


def ate(
    pred: Trajectory,
    gt: Trajectory,
    mode: str = "similarity",
    association_tol: float = ASSOCIATION_TOLERANCE,
) -> float:
    """RMSE of the translational part of gt_i^-1 * S * pred_i over the
    timestamp-matched frames, with S fitted over the chosen family."""
    sub_pred, sub_gt = _matched_subsets(pred, gt, association_tol)
    transform = umeyama_align(sub_pred, sub_gt, mode)
    aligned = transform.apply(sub_pred.translations())
    errors = aligned - sub_gt.translations()
    return float(np.sqrt((errors**2).sum(axis=1).mean()))


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    delta_1_25: float


def depth_metrics(
    pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, cap: float
) -> DepthMetrics:
    """Standard depth accuracy metrics over jointly valid pixels, with the
    ground truth capped to (0, cap]."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    joint = (
        mask
        & np.isfinite(gt)
        & (gt > 0)
        & (gt <= cap)
        & np.isfinite(pred)
        & (pred > 0)
    )
    if not joint.any():
        raise NoOverlapError("no jointly valid pixels for depth metrics")
    p = pred[joint]
    g = gt[joint]
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        delta_1_25=float(np.mean(ratio < 1.25)),
    )


@dataclass(frozen=True)
class FailureReport:
    ate_value: float
    is_failure: bool
    path_length: float
    max_step_translation: float
    total_forward_displacement: float
    large_motion_flag: bool
    threshold: float


def classify_failure(
    ate_value: float, gt: Trajectory, threshold: float = FAILURE_ATE_THRESHOLD
) -> FailureReport:
    """Failure iff the error strictly exceeds the threshold; motion
    statistics come from the ground truth."""
    if len(gt) < 2:
        raise ShapeError("motion statistics need at least 2 ground-truth poses")
    t = gt.translations()
    steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
    displacement = float(np.linalg.norm(t[-1] - t[0]))
    return FailureReport(
        ate_value=float(ate_value),
        is_failure=bool(ate_value > threshold),
        path_length=float(steps.sum()),
        max_step_translation=float(steps.max()),
        total_forward_displacement=displacement,
        large_motion_flag=bool(displacement >= LARGE_MOTION_DISPLACEMENT),
        threshold=float(threshold),
    )
