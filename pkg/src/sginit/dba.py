"""Weighted dense bundle adjustment over a keyframe graph.

The energy is a weighted sum of squared flow residuals over co-visible
keyframe pairs: for each directed edge (i, j), the pixel grid of frame i is
backprojected with its inverse depth, transformed by the relative pose
g_ij = g_j * g_i^-1, and projected into frame j; the residual against the
per-edge target flow is weighted per pixel and per component.

Variables are keyframe poses (right-perturbed, g <- g * exp(xi)) and
per-pixel inverse depths of each keyframe.  Each Gauss-Newton step builds
the damped normal equations, eliminates the (diagonal) depth block with a
Schur complement, solves the reduced pose system, and back-substitutes.

Accumulation runs in a fixed edge-then-pixel order so results are
bit-reproducible; per-edge linearizations may be computed in parallel (the
SGINIT_THREADS environment variable caps the worker count) but are always
combined in edge order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from .errors import ConfigError, ShapeError, SingularSystemError
from .geometry import (
    CameraIntrinsics,
    FlowField,
    InverseDepthMap,
    Pose,
    Twist,
    backproject_rays,
    compose,
    inverse,
    se3_exp,
)

_MIN_DEPTH_Z = 1e-8

Edge = tuple[int, int]


def worker_count() -> int:
    """Worker cap from SGINIT_THREADS; defaults to 1 (serial)."""
    raw = os.environ.get("SGINIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SGINIT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class KeyframeGraph:
    """Directed co-visibility edges over keyframes; always bidirectional."""

    num_keyframes: int
    edges: tuple[Edge, ...]

    def __post_init__(self):
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        seen = set()
        for i, j in edges:
            if i == j:
                raise ConfigError(f"self edge ({i},{j}) not allowed")
            if not (0 <= i < self.num_keyframes and 0 <= j < self.num_keyframes):
                raise ConfigError(f"edge ({i},{j}) out of range for {self.num_keyframes} keyframes")
            if (i, j) in seen:
                raise ConfigError(f"duplicate edge ({i},{j})")
            seen.add((i, j))
        for i, j in edges:
            if (j, i) not in seen:
                raise ConfigError(f"edge ({i},{j}) lacks its reverse ({j},{i})")
        object.__setattr__(self, "edges", edges)


@dataclass(frozen=True)
class ConfidenceWeights:
    """Per-pixel, per-flow-component non-negative weights."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[2] != 2:
            raise ShapeError("weights must be (H, W, 2)")
        if not np.isfinite(values).all() or (values < 0).any():
            raise ShapeError("weights must be finite and non-negative")
        object.__setattr__(self, "values", values)

    @classmethod
    def uniform(cls, shape: tuple[int, int], value: float = 1.0) -> "ConfidenceWeights":
        return cls(np.full((*shape, 2), float(value)))


@dataclass(frozen=True)
class EdgeTarget:
    """Target flow p* for one edge with its confidence weights; weights are
    zeroed wherever the target is invalid."""

    target_flow: FlowField
    weights: ConfidenceWeights

    def __post_init__(self):
        if self.weights.values.shape[:2] != self.target_flow.values.shape[:2]:
            raise ShapeError("weight and target shapes differ")
        masked = np.where(
            self.target_flow.valid[..., None], self.weights.values, 0.0
        )
        object.__setattr__(self, "weights", ConfidenceWeights(masked))


@dataclass(frozen=True)
class BAState:
    """Optimization variables: one pose and one inverse depth map per keyframe."""

    poses: tuple[Pose, ...]
    inv_depths: tuple[InverseDepthMap, ...]
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "inv_depths", tuple(self.inv_depths))
        if len(self.poses) != len(self.inv_depths):
            raise ShapeError("pose and depth counts differ")
        for d in self.inv_depths:
            if d.shape != self.intrinsics.shape:
                raise ShapeError("inverse depth shape does not match intrinsics")

    @property
    def num_keyframes(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 10
    damping: float = 1e-4
    depth_floor: float = 1e-4
    convergence_tol: float = 1e-8
    fixed_poses: int = 1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.fixed_poses < 1:
            raise ConfigError("fixed_poses must be >= 1 (gauge)")
        if self.damping < 0:
            raise ConfigError("damping must be non-negative")


class FlowRevisionProvider(Protocol):
    """Answers per-edge queries with a flow revision and confidence weights,
    both (H, W, 2), given the currently estimated flow."""

    def query(self, edge: Edge, current_flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
        ...


@dataclass(frozen=True)
class EdgeLinearization:
    """Residual r = p* - warp(state) and its Jacobians w.r.t. the right
    perturbations of g_i, g_j and the source inverse depth; rows of pixels
    where the warp is undefined are zero."""

    residual: np.ndarray      # (H, W, 2)
    j_pose_i: np.ndarray      # (H, W, 2, 6)
    j_pose_j: np.ndarray      # (H, W, 2, 6)
    j_depth: np.ndarray       # (H, W, 2)
    weights: np.ndarray       # (H, W, 2), already masked
    valid: np.ndarray         # (H, W)


def _warp_terms(state: BAState, edge: Edge):
    """Shared forward pass: warp frame i's grid into frame j."""
    i, j = edge
    k = state.intrinsics
    d = state.inv_depths[i]
    g_i, g_j = state.poses[i], state.poses[j]
    g_ij = compose(g_j, inverse(g_i))
    rays = backproject_rays(k)
    safe_d = np.where(d.valid, d.values, 1.0)
    points_i = rays / safe_d[..., None]
    r_ij = g_ij.rotation_matrix()
    points_j = points_i @ r_ij.T + g_ij.translation
    z = points_j[..., 2]
    defined = d.valid & (z > _MIN_DEPTH_Z)
    safe_z = np.where(defined, z, 1.0)
    u = k.fx * points_j[..., 0] / safe_z + k.cx
    v = k.fy * points_j[..., 1] / safe_z + k.cy
    flow = np.where(defined[..., None], np.stack([u, v], axis=-1), 0.0)
    return g_ij, points_i, points_j, safe_d, safe_z, flow, defined


def current_flow(state: BAState, edge: Edge) -> FlowField:
    """Flow induced by the current state for one edge; the mask additionally
    requires the target coordinate to be in bounds (flow-field convention)."""
    k = state.intrinsics
    _, _, _, _, _, flow, defined = _warp_terms(state, edge)
    u, v = flow[..., 0], flow[..., 1]
    in_bounds = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return FlowField(flow, defined & in_bounds)


def edge_residual_jacobian(state: BAState, edge: Edge, target: EdgeTarget) -> EdgeLinearization:
    """Residual and analytic Jacobians for one directed edge.

    The depth of a pixel couples only to its own residual, and the two pose
    Jacobians are exact negatives of each other because both poses act on
    the same world point.
    """
    k = state.intrinsics
    if target.target_flow.values.shape[:2] != k.shape:
        raise ShapeError("target shape does not match intrinsics")
    i, j = edge
    g_ij, points_i, points_j, safe_d, safe_z, flow, defined = _warp_terms(state, edge)

    residual = np.where(defined[..., None], target.target_flow.values - flow, 0.0)

    x, y = points_j[..., 0], points_j[..., 1]
    inv_z = 1.0 / safe_z
    zeros = np.zeros(k.shape)
    # d(project)/d(point in frame j): 2x3 per pixel
    j_proj = np.stack(
        [
            np.stack([k.fx * inv_z, zeros, -k.fx * x * inv_z * inv_z], axis=-1),
            np.stack([zeros, k.fy * inv_z, -k.fy * y * inv_z * inv_z], axis=-1),
        ],
        axis=-2,
    )

    g_i = state.poses[i]
    r_j = state.poses[j].rotation_matrix()
    # world point seen by the pixel (needed for pose perturbations)
    p_world = (points_i - g_i.translation) @ g_i.rotation_matrix()

    a = j_proj @ r_j  # (H, W, 2, 3)
    # skew(p_world) per pixel
    px, py, pz = p_world[..., 0], p_world[..., 1], p_world[..., 2]
    skew = np.empty((*k.shape, 3, 3))
    skew[..., 0, 0] = 0.0
    skew[..., 0, 1] = -pz
    skew[..., 0, 2] = py
    skew[..., 1, 0] = pz
    skew[..., 1, 1] = 0.0
    skew[..., 1, 2] = -px
    skew[..., 2, 0] = -py
    skew[..., 2, 1] = px
    skew[..., 2, 2] = 0.0

    # flow derivative w.r.t. right perturbation of g_j: [-A skew(Pw) | A]
    j_flow_j = np.concatenate([-(a @ skew), a], axis=-1)
    mask4 = defined[..., None, None]
    # residual = target - flow, and d flow/d xi_i = -d flow/d xi_j
    j_pose_j = np.where(mask4, -j_flow_j, 0.0)
    j_pose_i = np.where(mask4, j_flow_j, 0.0)

    # d(point j)/d(inverse depth) = -(point_j - t_ij) / d
    dpt = -(points_j - g_ij.translation) / safe_d[..., None]
    j_flow_depth = np.einsum("hwab,hwb->hwa", j_proj, dpt)
    j_depth = np.where(defined[..., None], -j_flow_depth, 0.0)

    weights = np.where(defined[..., None], target.weights.values, 0.0)
    return EdgeLinearization(residual, j_pose_i, j_pose_j, j_depth, weights, defined)


@dataclass
class NormalEquations:
    """Damped Gauss-Newton system in block form.  h_pd maps a (pose, frame)
    pair to a (6, H*W) coupling block; h_dd holds the per-pixel diagonal of
    the depth block.  b is the right-hand side of H * delta = b."""

    num_keyframes: int
    pixels: int
    h_pp: np.ndarray                      # (N, N, 6, 6)
    h_pd: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    h_dd: np.ndarray = None               # (N, H*W)
    b_p: np.ndarray = None                # (N, 6)
    b_d: np.ndarray = None                # (N, H*W)


def build_normal_equations(
    state: BAState,
    graph: KeyframeGraph,
    targets: Mapping[Edge, EdgeTarget],
    damping: float = 0.0,
) -> NormalEquations:
    """Accumulate H = J^T W J (+ multiplicative diagonal damping) and the
    right-hand side b over all edges, in fixed edge-then-pixel order."""
    for edge in graph.edges:
        if edge not in targets:
            raise ConfigError(f"no target supplied for edge {edge}")
    n = graph.num_keyframes
    pixels = state.intrinsics.width * state.intrinsics.height
    eq = NormalEquations(
        n,
        pixels,
        h_pp=np.zeros((n, n, 6, 6)),
        h_dd=np.zeros((n, pixels)),
        b_p=np.zeros((n, 6)),
        b_d=np.zeros((n, pixels)),
    )

    workers = worker_count()
    if workers > 1 and len(graph.edges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            lins = list(
                pool.map(lambda e: edge_residual_jacobian(state, e, targets[e]), graph.edges)
            )
    else:
        lins = [edge_residual_jacobian(state, e, targets[e]) for e in graph.edges]

    for edge, lin in zip(graph.edges, lins):
        i, j = edge
        w = lin.weights
        ji, jj, jd, res = lin.j_pose_i, lin.j_pose_j, lin.j_depth, lin.residual

        h_ii = np.einsum("hwau,hwa,hwav->uv", ji, w, ji)
        h_jj = np.einsum("hwau,hwa,hwav->uv", jj, w, jj)
        h_ij = np.einsum("hwau,hwa,hwav->uv", ji, w, jj)
        eq.h_pp[i, i] += h_ii
        eq.h_pp[j, j] += h_jj
        eq.h_pp[i, j] += h_ij
        eq.h_pp[j, i] += h_ij.T

        pd_i = np.einsum("hwau,hwa,hwa->uhw", ji, w, jd).reshape(6, pixels)
        pd_j = np.einsum("hwau,hwa,hwa->uhw", jj, w, jd).reshape(6, pixels)
        for key, block in (((i, i), pd_i), ((j, i), pd_j)):
            if key in eq.h_pd:
                eq.h_pd[key] = eq.h_pd[key] + block
            else:
                eq.h_pd[key] = block

        eq.h_dd[i] += np.einsum("hwa,hwa->hw", w * jd, jd).reshape(pixels)

        # b = -J^T W r (J is the residual Jacobian, so this is the GN step RHS)
        eq.b_p[i] -= np.einsum("hwau,hwa,hwa->u", ji, w, res)
        eq.b_p[j] -= np.einsum("hwau,hwa,hwa->u", jj, w, res)
        eq.b_d[i] -= np.einsum("hwa,hwa->hw", w * jd, res).reshape(pixels)

    if damping > 0.0:
        for p in range(n):
            diag = np.diagonal(eq.h_pp[p, p]).copy()
            eq.h_pp[p, p][np.arange(6), np.arange(6)] = diag * (1.0 + damping)
        eq.h_dd *= 1.0 + damping
    return eq


def dense_system(eq: NormalEquations) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the full dense (poses + depths) system; for oracles and tests."""
    n, pix = eq.num_keyframes, eq.pixels
    dim = 6 * n + pix * n
    h = np.zeros((dim, dim))
    b = np.zeros(dim)
    for p in range(n):
        for q in range(n):
            h[6 * p : 6 * p + 6, 6 * q : 6 * q + 6] = eq.h_pp[p, q]
        b[6 * p : 6 * p + 6] = eq.b_p[p]
    for (p, f), block in sorted(eq.h_pd.items()):
        rows = slice(6 * p, 6 * p + 6)
        cols = slice(6 * n + f * pix, 6 * n + (f + 1) * pix)
        h[rows, cols] += block
        h[cols, rows] += block.T
    for f in range(n):
        cols = np.arange(6 * n + f * pix, 6 * n + (f + 1) * pix)
        h[cols, cols] = eq.h_dd[f]
        b[cols] = eq.b_d[f]
    return h, b


def schur_solve(
    eq: NormalEquations, fixed_poses: int
) -> tuple[list[Twist], np.ndarray]:
    """Eliminate the diagonal depth block, solve the reduced pose system for
    the non-fixed poses, and back-substitute the depth updates.

    Depth pixels with no information (zero diagonal) receive a zero update.
    """
    n, pix = eq.num_keyframes, eq.pixels
    if fixed_poses < 1 or fixed_poses > n:
        raise ConfigError(f"fixed_poses={fixed_poses} out of range for {n} keyframes")
    inv_dd = np.where(eq.h_dd > 0.0, 1.0 / np.where(eq.h_dd > 0.0, eq.h_dd, 1.0), 0.0)

    s = eq.h_pp.copy()
    b_red = eq.b_p.copy()
    frames = sorted({f for _, f in eq.h_pd})
    for f in frames:
        coupled = sorted(p for p, g in eq.h_pd if g == f)
        ib = inv_dd[f] * eq.b_d[f]
        for p in coupled:
            hp = eq.h_pd[(p, f)]
            b_red[p] -= hp @ ib
            for q in coupled:
                hq = eq.h_pd[(q, f)]
                s[p, q] -= np.einsum("ux,x,vx->uv", hp, inv_dd[f], hq)

    free = list(range(fixed_poses, n))
    pose_updates = [Twist(np.zeros(3), np.zeros(3)) for _ in range(n)]
    delta_p = np.zeros((n, 6))
    if free:
        m = len(free)
        s_free = np.zeros((6 * m, 6 * m))
        b_free = np.zeros(6 * m)
        for a, p in enumerate(free):
            b_free[6 * a : 6 * a + 6] = b_red[p]
            for c, q in enumerate(free):
                s_free[6 * a : 6 * a + 6, 6 * c : 6 * c + 6] = s[p, q]
        if not b_free.any():
            # zero right-hand side: the step is exactly zero, no solve needed
            x = np.zeros(6 * m)
        else:
            try:
                chol = np.linalg.cholesky(s_free)
                x = np.linalg.solve(chol.T, np.linalg.solve(chol, b_free))
            except np.linalg.LinAlgError:
                _, eigvecs = np.linalg.eigh(s_free)
                null = eigvecs[:, 0]
                blocks = null.reshape(m, 6)
                worst = free[int(np.argmax(np.linalg.norm(blocks, axis=1)))]
                raise SingularSystemError(worst) from None
        for a, p in enumerate(free):
            delta_p[p] = x[6 * a : 6 * a + 6]
            pose_updates[p] = Twist.from_vector(delta_p[p])

    depth_updates = np.zeros((n, pix))
    for f in frames:
        back = eq.b_d[f].copy()
        for p, g in eq.h_pd:
            if g == f:
                back -= eq.h_pd[(p, f)].T @ delta_p[p]
        depth_updates[f] = inv_dd[f] * back
    return pose_updates, depth_updates


def apply_updates(
    state: BAState,
    pose_updates: list[Twist],
    depth_updates: np.ndarray,
    depth_floor: float = 1e-4,
    fixed_poses: int = 0,
) -> tuple[BAState, int]:
    """Retract pose updates (right multiplication) and increment inverse
    depths, clamping them to depth_floor.  Returns the new state and the
    number of clamped pixels.  Zero updates leave the original objects in
    place, so fixed poses stay bit-identical."""
    new_poses = []
    for idx, (pose, xi) in enumerate(zip(state.poses, pose_updates)):
        vec = xi.as_vector()
        if idx < fixed_poses or not vec.any():
            new_poses.append(pose)
        else:
            new_poses.append(compose(pose, se3_exp(xi)))

    clamped = 0
    new_depths = []
    shape = state.intrinsics.shape
    for idx, d in enumerate(state.inv_depths):
        delta = depth_updates[idx].reshape(shape)
        if not delta.any():
            new_depths.append(d)
            continue
        values = d.values + np.where(d.valid, delta, 0.0)
        low = d.valid & (values < depth_floor)
        clamped += int(low.sum())
        values = np.where(low, depth_floor, values)
        values = np.where(d.valid, values, d.values)
        new_depths.append(InverseDepthMap(values, d.valid))
    return BAState(tuple(new_poses), tuple(new_depths), state.intrinsics), clamped


@dataclass(frozen=True)
class IterationStats:
    residual_norm: float
    update_norm: float
    clamped: int
    accepted: bool


@dataclass(frozen=True)
class OptimizeReport:
    iterations: tuple[IterationStats, ...]
    converged: bool
    stop_reason: str

    @property
    def num_iterations(self) -> int:
        return len(self.iterations)


def _weighted_residual_norm(
    state: BAState, graph: KeyframeGraph, targets: Mapping[Edge, EdgeTarget]
) -> float:
    total = 0.0
    for edge in graph.edges:
        _, _, _, _, _, flow, defined = _warp_terms(state, edge)
        tgt = targets[edge]
        res = np.where(defined[..., None], tgt.target_flow.values - flow, 0.0)
        w = np.where(defined[..., None], tgt.weights.values, 0.0)
        total += float(np.sum(w * res * res))
    return float(np.sqrt(total))


def optimize(
    state: BAState,
    graph: KeyframeGraph,
    provider: FlowRevisionProvider,
    config: SolverConfig,
) -> tuple[BAState, OptimizeReport]:
    """Iterate: current flows -> provider revision -> targets p* = r + p ->
    damped Gauss-Newton step with Schur elimination -> retracted update.
    A step that would increase the weighted residual against the current
    targets is rejected and the loop stops; the first fixed_poses poses are
    never touched."""
    stats: list[IterationStats] = []
    converged = False
    stop_reason = "max_iterations"
    for _ in range(config.max_iterations):
        targets: dict[Edge, EdgeTarget] = {}
        for edge in graph.edges:
            flow = current_flow(state, edge)
            revision, weights = provider.query(edge, flow)
            values = flow.values + np.asarray(revision, dtype=float)
            target = FlowField(values, np.isfinite(values).all(axis=-1))
            targets[edge] = EdgeTarget(target, ConfidenceWeights(np.asarray(weights, dtype=float)))

        residual_norm = _weighted_residual_norm(state, graph, targets)
        eq = build_normal_equations(state, graph, targets, damping=config.damping)
        pose_updates, depth_updates = schur_solve(eq, config.fixed_poses)

        update_norm = 0.0
        for xi in pose_updates[config.fixed_poses :]:
            update_norm = max(update_norm, float(np.linalg.norm(xi.as_vector())))
        if depth_updates.size:
            update_norm = max(update_norm, float(np.abs(depth_updates).max()))

        if update_norm < config.convergence_tol:
            # below-tolerance step: stop without applying it
            stats.append(IterationStats(residual_norm, update_norm, 0, True))
            converged = True
            stop_reason = "converged"
            break

        candidate, clamped = apply_updates(
            state, pose_updates, depth_updates, config.depth_floor, config.fixed_poses
        )
        candidate_norm = _weighted_residual_norm(candidate, graph, targets)
        accepted = candidate_norm <= residual_norm * (1.0 + 1e-12) + 1e-15
        stats.append(IterationStats(residual_norm, update_norm, clamped, accepted))
        if not accepted:
            stop_reason = "step_rejected"
            break
        state = candidate
    return state, OptimizeReport(tuple(stats), converged, stop_reason)
