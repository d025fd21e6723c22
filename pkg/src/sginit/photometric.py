"""Self-supervision objective: photometric warping, SSIM, the combined
SSIM + L1 photometric loss, edge-aware smoothness, and an analytic gradient
of the photometric loss with respect to the warp pose and the depth map.

Images are float arrays in [0, 1], either (H, W) or (H, W, C) with C in
{1, 3}.  SSIM uses a uniform box window with replicate borders and the
standard stabilizers c1 = 0.01^2, c2 = 0.03^2.  Warping masks a pixel when
any of its four bilinear corners falls outside the context image or the
transformed depth is non-positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, NoValidPixelsError, ShapeError
from .geometry import CameraIntrinsics, Pose, backproject_rays

_C1 = 0.01**2
_C2 = 0.03**2
_MIN_Z = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85
    smoothness_lambda: float = 1e-4
    ssim_window: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ShapeError("alpha must lie in [0, 1]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ShapeError("ssim_window must be odd and positive")


def _as_channels(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ShapeError("image must be (H, W) or (H, W, C) with C in {1, 3}")
    return image


def box_filter(x: np.ndarray, window: int) -> np.ndarray:
    """Uniform box mean with replicate borders."""
    h, w = x.shape
    r = window // 2
    out = np.zeros_like(x)
    ys = np.arange(h)
    xs = np.arange(w)
    for dy in range(-r, r + 1):
        iy = np.clip(ys + dy, 0, h - 1)
        for dx in range(-r, r + 1):
            ix = np.clip(xs + dx, 0, w - 1)
            out += x[iy[:, None], ix[None, :]]
    return out / float(window * window)


def box_filter_adjoint(g: np.ndarray, window: int) -> np.ndarray:
    """Transpose of box_filter: scatter-add through the clamped window."""
    h, w = g.shape
    r = window // 2
    out = np.zeros_like(g)
    ys = np.arange(h)
    xs = np.arange(w)
    for dy in range(-r, r + 1):
        iy = np.clip(ys + dy, 0, h - 1)
        for dx in range(-r, r + 1):
            ix = np.clip(xs + dx, 0, w - 1)
            np.add.at(out, (iy[:, None], ix[None, :]), g)
    return out / float(window * window)


def _warp_detail(context: np.ndarray, depth_t: np.ndarray, pose: Pose, k: CameraIntrinsics):
    """Forward warp with everything the gradient pass needs."""
    context = _as_channels(context)
    depth_t = np.asarray(depth_t, dtype=float)
    if context.shape[:2] != k.shape or depth_t.shape != k.shape:
        raise ShapeError("context/depth shape does not match intrinsics")
    rays = backproject_rays(k)
    depth_ok = np.isfinite(depth_t) & (depth_t > 0)
    safe_depth = np.where(depth_ok, depth_t, 1.0)
    points_t = rays * safe_depth[..., None]
    r = pose.rotation_matrix()
    points_c = points_t @ r.T + pose.translation
    z = points_c[..., 2]
    z_ok = z > _MIN_Z
    safe_z = np.where(z_ok, z, 1.0)
    u = k.fx * points_c[..., 0] / safe_z + k.cx
    v = k.fy * points_c[..., 1] / safe_z + k.cy
    x0 = np.floor(u).astype(int)
    y0 = np.floor(v).astype(int)
    corners_ok = (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= k.width - 1) & (y0 + 1 <= k.height - 1)
    valid = depth_ok & z_ok & corners_ok
    x0c = np.clip(x0, 0, k.width - 2)
    y0c = np.clip(y0, 0, k.height - 2)
    wx = np.where(valid, u - x0c, 0.0)
    wy = np.where(valid, v - y0c, 0.0)
    i00 = context[y0c, x0c]
    i10 = context[y0c, x0c + 1]
    i01 = context[y0c + 1, x0c]
    i11 = context[y0c + 1, x0c + 1]
    wxe = wx[..., None]
    wye = wy[..., None]
    warped = (1 - wye) * ((1 - wxe) * i00 + wxe * i10) + wye * ((1 - wxe) * i01 + wxe * i11)
    warped = np.where(valid[..., None], warped, 0.0)
    return {
        "warped": warped,
        "valid": valid,
        "rays": rays,
        "points_t": points_t,
        "points_c": points_c,
        "safe_z": safe_z,
        "rotation": r,
        "corners": (i00, i10, i01, i11),
        "wx": wx,
        "wy": wy,
    }


def warp_image(
    context: np.ndarray, depth_t: np.ndarray, x_t_to_c: Pose, k: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Synthesize the target view from the context image: backproject the
    target grid with depth_t, transform by x_t_to_c, bilinearly sample."""
    detail = _warp_detail(context, depth_t, x_t_to_c, k)
    return detail["warped"], detail["valid"]


def _ssim_channel_terms(a: np.ndarray, b: np.ndarray, window: int):
    mu_a = box_filter(a, window)
    mu_b = box_filter(b, window)
    s_ab = box_filter(a * b, window)
    s_aa = box_filter(a * a, window)
    s_bb = box_filter(b * b, window)
    n1 = 2 * mu_a * mu_b + _C1
    n2 = 2 * (s_ab - mu_a * mu_b) + _C2
    d1 = mu_a**2 + mu_b**2 + _C1
    d2 = (s_aa - mu_a**2) + (s_bb - mu_b**2) + _C2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim(a: np.ndarray, b: np.ndarray, window: int = 3) -> np.ndarray:
    """Per-pixel structural similarity, channel-averaged."""
    a = _as_channels(a)
    b = _as_channels(b)
    if a.shape != b.shape:
        raise ShapeError("ssim inputs must share a shape")
    maps = []
    for c in range(a.shape[2]):
        _, _, n1, n2, d1, d2 = _ssim_channel_terms(a[..., c], b[..., c], window)
        maps.append(n1 * n2 / (d1 * d2))
    return np.mean(maps, axis=0)


def photometric_loss(
    i_t: np.ndarray,
    i_hat: np.ndarray,
    mask: np.ndarray,
    config: LossConfig = LossConfig(),
) -> tuple[float, np.ndarray]:
    """alpha * (1 - SSIM)/2 + (1 - alpha) * L1 per pixel; the scalar is the
    mean over the masked pixels."""
    i_t = _as_channels(i_t)
    i_hat = _as_channels(i_hat)
    if i_t.shape != i_hat.shape:
        raise ShapeError("image shapes differ")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != i_t.shape[:2]:
        raise ShapeError("mask shape does not match images")
    if not mask.any():
        raise NoValidPixelsError("photometric loss over an empty mask")
    s = ssim(i_t, i_hat, config.ssim_window)
    l1 = np.abs(i_t - i_hat).mean(axis=2)
    per_pixel = config.alpha * (1.0 - s) / 2.0 + (1.0 - config.alpha) * l1
    return float(per_pixel[mask].mean()), per_pixel


def smoothness_loss(inv_depth: np.ndarray, image: np.ndarray, lam: float) -> float:
    """Edge-aware smoothness of the mean-normalized inverse depth: forward
    differences weighted by exp(-|image gradient|), channel-mean gradients."""
    inv_depth = np.asarray(inv_depth, dtype=float)
    image = _as_channels(image)
    if inv_depth.shape != image.shape[:2]:
        raise ShapeError("inverse depth and image shapes differ")
    mean = inv_depth.mean()
    if mean == 0:
        raise DegenerateFitError("mean inverse depth is zero")
    d = inv_depth / mean
    gray = image.mean(axis=2)
    dx = np.abs(d[:, 1:] - d[:, :-1]) * np.exp(-np.abs(gray[:, 1:] - gray[:, :-1]))
    dy = np.abs(d[1:, :] - d[:-1, :]) * np.exp(-np.abs(gray[1:, :] - gray[:-1, :]))
    return float(lam * (dx.mean() + dy.mean()))


@dataclass(frozen=True)
class PhotometricGradient:
    loss: float
    grad_pose: np.ndarray   # (6,) w.r.t. right perturbation of the warp pose
    grad_depth: np.ndarray  # (H, W) w.r.t. the metric depth entries
    valid: np.ndarray       # (H, W) mask the scalar loss averaged over


def photometric_gradient(
    i_t: np.ndarray,
    context: np.ndarray,
    depth_t: np.ndarray,
    x_t_to_c: Pose,
    k: CameraIntrinsics,
    config: LossConfig = LossConfig(),
) -> PhotometricGradient:
    """Analytic gradient of the photometric loss through bilinear sampling
    and the SSIM box filters; the chain is warp -> sample -> SSIM/L1 ->
    masked mean.  The validity mask is treated as constant."""
    i_t = _as_channels(i_t)
    detail = _warp_detail(context, depth_t, x_t_to_c, k)
    i_hat = detail["warped"]
    valid = detail["valid"]
    if not valid.any():
        raise NoValidPixelsError("no valid warp pixels")
    loss, _ = photometric_loss(i_t, i_hat, valid, config)

    n_valid = float(valid.sum())
    channels = i_t.shape[2]
    window = config.ssim_window
    g_ssim = np.where(valid, -config.alpha / (2.0 * n_valid), 0.0)
    g_l1 = np.where(valid, (1.0 - config.alpha) / n_valid, 0.0)

    d_ihat = np.zeros_like(i_hat)
    for c in range(channels):
        a = i_t[..., c]
        b = i_hat[..., c]
        mu_a, mu_b, n1, n2, d1, d2 = _ssim_channel_terms(a, b, window)
        s_map = n1 * n2 / (d1 * d2)
        g = g_ssim / channels
        g_n1 = g * n2 / (d1 * d2)
        g_n2 = g * n1 / (d1 * d2)
        g_d1 = -g * s_map / d1
        g_d2 = -g * s_map / d2
        g_cov = 2.0 * g_n2
        g_varb = g_d2
        g_mu_b = 2.0 * mu_a * g_n1 + 2.0 * mu_b * g_d1 - mu_a * g_cov - 2.0 * mu_b * g_varb
        g_box_ab = g_cov
        g_box_bb = g_varb
        d_ihat[..., c] += box_filter_adjoint(g_mu_b, window)
        d_ihat[..., c] += a * box_filter_adjoint(g_box_ab, window)
        d_ihat[..., c] += 2.0 * b * box_filter_adjoint(g_box_bb, window)
        d_ihat[..., c] += g_l1 * np.sign(b - a) / channels

    i00, i10, i01, i11 = detail["corners"]
    wx = detail["wx"][..., None]
    wy = detail["wy"][..., None]
    d_du = ((1 - wy) * (i10 - i00) + wy * (i11 - i01)) * d_ihat
    d_dv = ((1 - wx) * (i01 - i00) + wx * (i11 - i10)) * d_ihat
    g_u = np.where(valid, d_du.sum(axis=2), 0.0)
    g_v = np.where(valid, d_dv.sum(axis=2), 0.0)

    points_c = detail["points_c"]
    safe_z = detail["safe_z"]
    inv_z = 1.0 / safe_z
    zeros = np.zeros(k.shape)
    j_proj = np.stack(
        [
            np.stack([k.fx * inv_z, zeros, -k.fx * points_c[..., 0] * inv_z**2], axis=-1),
            np.stack([zeros, k.fy * inv_z, -k.fy * points_c[..., 1] * inv_z**2], axis=-1),
        ],
        axis=-2,
    )
    r = detail["rotation"]
    a_mat = j_proj @ r
    pt = detail["points_t"]
    px, py, pz = pt[..., 0], pt[..., 1], pt[..., 2]
    skew = np.zeros((*k.shape, 3, 3))
    skew[..., 0, 1] = -pz
    skew[..., 0, 2] = py
    skew[..., 1, 0] = pz
    skew[..., 1, 2] = -px
    skew[..., 2, 0] = -py
    skew[..., 2, 1] = px
    j_coord_pose = np.concatenate([-(a_mat @ skew), a_mat], axis=-1)  # (H, W, 2, 6)
    g_uv = np.stack([g_u, g_v], axis=-1)
    grad_pose = np.einsum("hwa,hwau->u", g_uv, j_coord_pose)

    d_dd = np.einsum("hwab,hwb->hwa", j_proj, detail["rays"] @ r.T)
    grad_depth = np.einsum("hwa,hwa->hw", g_uv, d_dd)
    return PhotometricGradient(loss, grad_pose, grad_depth, valid)
