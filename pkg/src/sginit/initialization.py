"""Geometry-guided initialization: chain relative-pose priors into absolute
keyframe poses, pick keyframes by mean prior flow, and seed the bundle
adjustment state from prior depths — or build the naive baseline (identity
poses, uniform inverse depth) used as the ablation control.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dba import BAState, KeyframeGraph
from .errors import ConfigError
from .geometry import (
    CameraIntrinsics,
    InverseDepthMap,
    Pose,
    compose,
    inverse,
    pixel_grid,
    reproject_flow,
)

GEOMETRY_GUIDED = "geometry_guided"
NAIVE = "naive"
CONSTANT_MOTION = "constant_motion"
IDENTITY_EXTRAPOLATION = "identity"

NAIVE_INVERSE_DEPTH = 1.0
DEFAULT_CHAIN_LIMIT = 8


@dataclass(frozen=True)
class PriorBundle:
    """Per-frame depth priors plus consecutive relative-pose priors."""

    depth_priors: tuple[InverseDepthMap, ...]
    relative_poses: tuple[Pose, ...]
    base_index: int = 0
    base_pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        object.__setattr__(self, "depth_priors", tuple(self.depth_priors))
        object.__setattr__(self, "relative_poses", tuple(self.relative_poses))
        n = len(self.depth_priors)
        if n and len(self.relative_poses) != n - 1:
            raise ConfigError(
                f"{n} frames need {n - 1} relative poses, got {len(self.relative_poses)}"
            )
        if not (0 <= self.base_index <= len(self.relative_poses)):
            raise ConfigError(f"base index {self.base_index} out of range")

    @property
    def num_frames(self) -> int:
        return len(self.relative_poses) + 1


@dataclass(frozen=True)
class InitPolicy:
    mode: str = GEOMETRY_GUIDED
    chain_limit: int = DEFAULT_CHAIN_LIMIT
    extrapolation: str = CONSTANT_MOTION

    def __post_init__(self):
        if self.mode not in (GEOMETRY_GUIDED, NAIVE):
            raise ConfigError(f"unknown init mode {self.mode!r}")
        if self.chain_limit < 2:
            raise ConfigError("chain_limit must be >= 2")
        if self.extrapolation not in (CONSTANT_MOTION, IDENTITY_EXTRAPOLATION):
            raise ConfigError(f"unknown extrapolation {self.extrapolation!r}")


def chain_poses(relatives, base_index: int, base_pose: Pose) -> list[Pose]:
    """Absolute poses from consecutive relatives: walking forward from the
    base frame left-composes each relative, walking backward composes the
    inverses.  The base frame keeps base_pose exactly."""
    relatives = list(relatives)
    if not relatives:
        raise ConfigError("chain_poses needs at least one relative pose")
    n = len(relatives) + 1
    if not (0 <= base_index < n):
        raise ConfigError(f"base index {base_index} out of range for {n} frames")
    poses: list[Pose | None] = [None] * n
    poses[base_index] = base_pose
    for i in range(base_index + 1, n):
        poses[i] = compose(relatives[i - 1], poses[i - 1])
    for i in range(base_index - 1, -1, -1):
        poses[i] = compose(inverse(relatives[i]), poses[i + 1])
    return poses  # type: ignore[return-value]


def build_keyframe_graph(num_keyframes: int, window: int) -> KeyframeGraph:
    """Bidirectional edges between all keyframe pairs within the window."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    edges = tuple(
        (i, j)
        for i in range(num_keyframes)
        for j in range(num_keyframes)
        if i != j and abs(i - j) <= window
    )
    return KeyframeGraph(num_keyframes, edges)


def mean_prior_flow(
    k: CameraIntrinsics,
    prior_depth: InverseDepthMap,
    g_from: Pose,
    g_to: Pose,
) -> float:
    """Mean flow displacement magnitude predicted by the priors; infinite
    when no pixel survives the warp (nothing co-visible)."""
    flow = reproject_flow(k, compose(g_to, inverse(g_from)), prior_depth)
    if not flow.valid.any():
        return float("inf")
    disp = flow.values - pixel_grid(k)
    return float(np.linalg.norm(disp[flow.valid], axis=-1).mean())


def select_keyframes(
    priors: PriorBundle, k: CameraIntrinsics, mean_flow_threshold: float
) -> list[int]:
    """Greedy keyframing on prior flow: frame 0 always, then every frame
    whose mean flow from the last keyframe exceeds the threshold; the final
    frame is always included."""
    chained = chain_poses(priors.relative_poses, priors.base_index, priors.base_pose)
    keyframes = [0]
    last = 0
    for t in range(1, priors.num_frames):
        flow = mean_prior_flow(k, priors.depth_priors[last], chained[last], chained[t])
        if flow > mean_flow_threshold:
            keyframes.append(t)
            last = t
    if keyframes[-1] != priors.num_frames - 1:
        keyframes.append(priors.num_frames - 1)
    return keyframes


def initialize_state(
    priors: PriorBundle,
    keyframes,
    policy: InitPolicy,
    k: CameraIntrinsics,
) -> BAState:
    """Seed the bundle adjustment state for the selected keyframes.

    geometry_guided: inverse depths copied from the priors for every
    keyframe; poses for the first chain_limit keyframes come from the
    chained relatives, later ones follow the extrapolation policy
    (constant_motion repeats the last inter-keyframe relative).

    naive: identity poses and uniform inverse depth everywhere.
    """
    keyframes = list(keyframes)
    if not keyframes:
        raise ConfigError("need at least one keyframe")
    if policy.mode == NAIVE:
        shape = k.shape
        depths = tuple(
            InverseDepthMap(np.full(shape, NAIVE_INVERSE_DEPTH), np.ones(shape, bool))
            for _ in keyframes
        )
        return BAState(tuple(Pose.identity() for _ in keyframes), depths, k)

    for f in keyframes:
        if not (0 <= f < priors.num_frames):
            raise ConfigError(f"keyframe {f} outside prior range 0..{priors.num_frames - 1}")
    chained = chain_poses(priors.relative_poses, priors.base_index, priors.base_pose)
    poses = [chained[f] for f in keyframes[: policy.chain_limit]]
    if len(keyframes) > policy.chain_limit:
        if policy.extrapolation == CONSTANT_MOTION and len(poses) >= 2:
            step = compose(poses[-1], inverse(poses[-2]))
        else:
            step = Pose.identity()
        for _ in range(len(keyframes) - policy.chain_limit):
            poses.append(compose(step, poses[-1]))
    depths = tuple(priors.depth_priors[f] for f in keyframes)
    return BAState(tuple(poses), depths, k)
