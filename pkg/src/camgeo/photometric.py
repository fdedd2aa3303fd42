"""View synthesis by depth/pose warping and the self-supervised loss stack.

Images are float arrays ``(H, W, 3)`` (or ``(H, W)``) with values in
[0, 1]. Pixel ``(u, v)`` is column ``u``, row ``v``; integer coordinates
sit on pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter, uniform_filter

from .cameras import CameraModel
from .errors import CamGeoError, ShapeError
from .geometry import Pose

D_MIN = 0.1
D_MAX = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WEIGHT = 0.85
SMOOTH_WEIGHT = 1e-3
EDGE_TOL = 1e-6  # px of roundoff tolerated on the image border


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2 or d.shape != m.shape:
            raise ShapeError("depth and valid mask must be matching (H, W) arrays")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", m)

    @classmethod
    def from_array(cls, depth, d_min: float = D_MIN, d_max: float = D_MAX) -> DepthMap:
        """Valid where ``d_min < depth < d_max``; everything else (0 = no data) invalid."""
        d = np.asarray(depth, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(d) & (d > d_min) & (d < d_max)
        return cls(np.where(valid, d, 0.0), valid)

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True, eq=False)
class WarpField:
    coords: np.ndarray  # (H, W, 2) source (u, v)
    valid: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if c.shape[-1] != 2 or c.shape[:-1] != v.shape:
            raise ShapeError("coords must be (..., 2) with a matching mask")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "valid", v)


def pixel_grid(H: int, W: int) -> np.ndarray:
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([u, v], axis=-1)


def in_bounds(coords, shape, tol: float = EDGE_TOL) -> np.ndarray:
    H, W = shape[:2]
    u, v = coords[..., 0], coords[..., 1]
    with np.errstate(invalid="ignore"):
        return np.isfinite(u) & np.isfinite(v) & (u >= -tol) & (u <= W - 1 + tol) & (v >= -tol) & (v <= H - 1 + tol)


def lift(depth: DepthMap, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Back-project every pixel; depth is in ``cam.depth_kind`` units."""
    X, ok = cam.unproject_with_mask(pixel_grid(*depth.shape))
    return X * depth.depth[..., None], ok & depth.valid


def warp_points(X, valid, pose: Pose, cam_c: CameraModel, src_shape) -> WarpField:
    uv, ok = cam_c.project_with_mask(pose.apply(X))
    ok = ok & valid
    ok &= in_bounds(uv, src_shape)
    return WarpField(np.where(ok[..., None], uv, np.nan), ok)


def warp_coords(depth: DepthMap, pose: Pose, cam_t: CameraModel, cam_c: CameraModel, src_shape=None) -> WarpField:
    """Where each target pixel lands in the context image.

    ``pose`` maps target-camera points into the context camera. Pixels
    with invalid depth, outside either camera's domain, or landing outside
    the context image (``src_shape``, default the target size) are flagged.
    """
    X, ok = lift(depth, cam_t)
    return warp_points(X, ok, pose, cam_c, depth.shape if src_shape is None else src_shape)


def sample_bilinear(src, field) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup of ``src`` at ``field`` (WarpField or raw coords).

    Out-of-bounds samples come back as 0 with a false mask.
    """
    src = np.asarray(src, dtype=np.float64)
    if isinstance(field, WarpField):
        coords, mask = field.coords, field.valid
    else:
        coords = np.asarray(field, dtype=np.float64)
        mask = np.ones(coords.shape[:-1], dtype=bool)
    H, W = src.shape[:2]
    mask = mask & in_bounds(coords, src.shape)
    u = np.clip(np.where(mask, coords[..., 0], 0.0), 0, W - 1)
    v = np.clip(np.where(mask, coords[..., 1], 0.0), 0, H - 1)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = u - u0
    fv = v - v0
    if src.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    out = (
        src[v0, u0] * (1 - fu) * (1 - fv)
        + src[v0, u1] * fu * (1 - fv)
        + src[v1, u0] * (1 - fu) * fv
        + src[v1, u1] * fu * fv
    )
    m = mask[..., None] if src.ndim == 3 else mask
    return np.where(m, out, 0.0), mask


def sample_nearest(src, field) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray(src)
    coords, mask = (field.coords, field.valid) if isinstance(field, WarpField) else (np.asarray(field), None)
    if mask is None:
        mask = np.ones(coords.shape[:-1], dtype=bool)
    mask = mask & in_bounds(coords, src.shape)
    u = np.rint(np.where(mask, coords[..., 0], 0)).astype(np.int64)
    v = np.rint(np.where(mask, coords[..., 1], 0)).astype(np.int64)
    out = src[v, u]
    m = mask[..., None] if src.ndim == 3 else mask
    return np.where(m, out, 0), mask


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim(a, b, window: int = 3, c1: float = SSIM_C1, c2: float = SSIM_C2) -> np.ndarray:
    """Per-pixel SSIM with box-window statistics and reflect padding."""
    a, b = _check_pair(a, b)
    size = (window, window) + (1,) * (a.ndim - 2)

    def mean(x):
        return uniform_filter(x, size=size, mode="mirror")

    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a**2
    var_b = mean(b * b) - mu_b**2
    cov = mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return np.clip(num / den, -1.0, 1.0)


def photometric_loss(target, synthesized, alpha: float = SSIM_WEIGHT, window: int = 3) -> np.ndarray:
    t, s = _check_pair(target, synthesized)
    per = alpha * (1 - ssim(t, s, window)) / 2 + (1 - alpha) * np.abs(t - s)
    return per.mean(axis=-1) if per.ndim == 3 else per


def min_reprojection(losses, original_losses=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel minimum over contexts and the auto-mask.

    A pixel is kept only where the best warped loss is strictly below the
    best loss of the unwarped contexts (static-pixel rule).
    """
    if len(losses) == 0:
        raise CamGeoError("min_reprojection needs at least one context")
    best = np.min(np.stack([np.asarray(x, dtype=np.float64) for x in losses]), axis=0)
    if original_losses is None or len(original_losses) == 0:
        return best, np.ones(best.shape, dtype=bool)
    orig = np.min(np.stack([np.asarray(x, dtype=np.float64) for x in original_losses]), axis=0)
    return best, best < orig


def smoothness(depth: DepthMap, image) -> float:
    """Edge-aware smoothness with forward differences, mean over valid pairs."""
    D = depth.depth
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[:2] != D.shape:
        raise ShapeError("depth and image sizes differ")
    total = 0.0
    for axis in (1, 0):
        dD = np.abs(np.diff(D, axis=axis))
        dI = np.mean(np.abs(np.diff(img, axis=axis)), axis=-1)
        ok = np.logical_and(
            np.take(depth.valid, range(D.shape[axis] - 1), axis=axis),
            np.take(depth.valid, range(1, D.shape[axis]), axis=axis),
        )
        if ok.any():
            total += float(np.mean((dD * np.exp(-dI))[ok]))
    return total


def total_loss(photo_map, smooth: float, lambda_d: float = SMOOTH_WEIGHT, mask=None) -> float:
    photo_map = np.asarray(photo_map, dtype=np.float64)
    if mask is None:
        mask = np.isfinite(photo_map)
    if not np.any(mask):
        raise CamGeoError("no valid pixels in the photometric map")
    return float(np.mean(photo_map[mask]) + lambda_d * smooth)


def view_synthesis_loss(target, context, depth: DepthMap, pose: Pose, cam_t, cam_c, alpha=SSIM_WEIGHT, lambda_d=SMOOTH_WEIGHT, automask=True):
    """Warp ``context`` into the target view and evaluate the full loss.

    Returns ``(loss, loss_map, mask)``. Pixels whose SSIM window touches an
    unsampled neighbour are left out of the mask.
    """
    field = warp_coords(depth, pose, cam_t, cam_c, np.shape(context))
    synth, ok = sample_bilinear(context, field)
    ok = minimum_filter(ok, size=3, mode="mirror")
    per = photometric_loss(target, synth, alpha)
    per = np.where(ok, per, np.inf)
    originals = [photometric_loss(target, context, alpha)] if automask and np.shape(context) == np.shape(target) else None
    best, keep = min_reprojection([per], originals)
    keep &= ok
    return total_loss(best, smoothness(depth, target), lambda_d, keep), best, keep
