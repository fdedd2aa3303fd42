"""Geometric scene-representation encodings and 3D view augmentations.

Per-pixel camera embeddings (Fourier-encoded ray origin and direction),
virtual cameras aimed at a scene pointcloud, z-buffered projection onto
them, canonical jittering and randomization of rig extrinsics, and the
depth / view-synthesis supervision losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .cameras import CameraModel
from .errors import CamGeoError, FormatError, ShapeError
from .geometry import EULER_SEQ, Pose, _checked_inverse, compose, homogenize
from .multicam import PointCloud
from .photometric import DepthMap, pixel_grid

UP = np.array([0.0, 0.0, 1.0])
UP_FALLBACK = np.array([0.0, 1.0, 0.0])
HEADER_TAG = "CAMEMB"


@dataclass(frozen=True)
class FourierConfig:
    k_o: int = 20
    k_r: int = 10
    mu_o: float = 60.0
    mu_r: float = 60.0

    def __post_init__(self):
        if self.k_o < 0 or self.k_r < 0:
            raise CamGeoError("frequency counts must be non-negative")
        if self.mu_o < 2 or self.mu_r < 2:
            raise CamGeoError("maximum resolution mu must be at least 2")

    @property
    def dim(self) -> int:
        return 3 * (2 * self.k_o + 1) + 3 * (2 * self.k_r + 1)


@dataclass(frozen=True)
class AugmentConfig:
    sigma_v: float = 0.25  # virtual camera translation / aim noise, m (std)
    sigma_t: float = 0.1  # canonical jitter translation, m (std)
    sigma_r: float = 0.1  # canonical jitter Euler angles, rad (std)

    def __post_init__(self):
        if min(self.sigma_v, self.sigma_t, self.sigma_r) < 0:
            raise CamGeoError("noise levels must be non-negative")


def _K(intrinsics) -> np.ndarray:
    if isinstance(intrinsics, CameraModel):
        return intrinsics.K
    return np.asarray(intrinsics, dtype=np.float64)


def camera_rays(intrinsics, pose: Pose, H: int, W: int, mode: str = "printed") -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origin and (unnormalized) direction, each (H, W, 3).

    ``printed``: ``o = -R t`` and ``r = (K R)^-1 [u, v, 1] + t``.
    ``geometric``: ``o = -R^T t`` (the camera center) and ``r = (K R)^-1 [u, v, 1]``.
    """
    Kinv = _checked_inverse(_K(intrinsics))
    M = pose.rotation.T @ Kinv  # (K R)^-1
    r = homogenize(pixel_grid(H, W)) @ M.T
    if mode == "printed":
        o = -pose.rotation @ pose.translation
        r = r + pose.translation
    elif mode == "geometric":
        o = pose.center
    else:
        raise CamGeoError(f"unknown ray mode {mode!r}")
    return np.broadcast_to(o, r.shape).copy(), r


def frequencies(K: int, mu: float) -> np.ndarray:
    return np.linspace(1.0, mu / 2, K) if K > 0 else np.empty(0)


def fourier_encode(x, K: int, mu: float) -> np.ndarray:
    """``[x, sin(f_1 pi x), cos(f_1 pi x), ...]`` per dimension, concatenated."""
    if K < 0:
        raise CamGeoError("K must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    f = frequencies(K, mu)
    arg = np.pi * x[..., None] * f
    parts = np.empty(x.shape + (2 * K + 1,))
    parts[..., 0] = x
    parts[..., 1::2] = np.sin(arg)
    parts[..., 2::2] = np.cos(arg)
    return parts.reshape(x.shape[:-1] + (-1,))


def camera_embedding(intrinsics, pose: Pose, H: int, W: int, cfg: FourierConfig | None = None, mode: str = "printed") -> np.ndarray:
    cfg = cfg or FourierConfig()
    o, r = camera_rays(intrinsics, pose, H, W, mode)
    return np.concatenate([fourier_encode(o, cfg.k_o, cfg.mu_o), fourier_encode(r, cfg.k_r, cfg.mu_r)], axis=-1)


def look_at(position, target) -> Pose:
    """World-to-camera pose at ``position`` with +z toward ``target`` and +y down."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(f)
    if n < 1e-12:
        raise CamGeoError("look-at target coincides with the camera position")
    f = f / n
    up = UP if abs(abs(f @ UP) - 1.0) > 1e-6 else UP_FALLBACK
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return Pose(R, -R @ position)


def virtual_camera(base: Pose, cloud: PointCloud | np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> Pose:
    """Base camera moved by N(0, sigma_v^2) noise, aimed at the (noisy) cloud centroid."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise CamGeoError("cannot aim a virtual camera at an empty pointcloud")
    eps_v = rng.normal(scale=cfg.sigma_v, size=3)
    eps_c = rng.normal(scale=cfg.sigma_v, size=3)
    return look_at(base.center + eps_v, pts.mean(axis=0) + eps_c)


def project_to_virtual(cloud: PointCloud, camera: CameraModel, pose: Pose, H: int, W: int) -> tuple[DepthMap, np.ndarray]:
    """Sparse depth and color seen by a virtual camera; nearest point wins."""
    X = pose.apply(cloud.points)
    uv, ok = camera.project_with_mask(X)
    depth = camera.depth_of(X)
    ok &= np.isfinite(uv).all(axis=1) & (depth > 0)
    px = np.rint(np.where(ok[:, None], uv, -1)).astype(np.int64)
    ok &= (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
    idx = np.flatnonzero(ok)
    flat = px[idx, 1] * W + px[idx, 0]
    order = np.lexsort((depth[idx], flat))
    flat, idx = flat[order], idx[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    flat, idx = flat[first], idx[first]
    D = np.zeros(H * W)
    C = np.zeros((H * W, 3))
    valid = np.zeros(H * W, dtype=bool)
    D[flat] = depth[idx]
    C[flat] = cloud.colors[idx]
    valid[flat] = True
    return DepthMap(D.reshape(H, W), valid.reshape(H, W)), C.reshape(H, W, 3)


def jitter_pose(cfg: AugmentConfig, rng: np.random.Generator) -> Pose:
    eps_t = rng.normal(scale=cfg.sigma_t, size=3)
    eps_r = rng.normal(scale=cfg.sigma_r, size=3)
    return Pose(Rotation.from_euler(EULER_SEQ, eps_r).as_matrix(), eps_t)


def canonical_jitter(extrinsics, cfg: AugmentConfig, rng: np.random.Generator) -> list[Pose]:
    """Apply one shared jitter to every extrinsic.

    Extrinsics map canonical points into each camera, so the jitter acts
    on the canonical frame: ``X_i' = X_i J``. The canonical camera becomes
    ``J`` and every ``X_i X_j^-1`` is unchanged.
    """
    extrinsics = list(extrinsics)
    if not extrinsics:
        raise CamGeoError("no extrinsics to jitter")
    J = jitter_pose(cfg, rng)
    return [compose(X, J) for X in extrinsics]


def canonical_randomize(extrinsics, rng: np.random.Generator) -> tuple[list[Pose], int]:
    """Pick a random camera ``o`` as the new canonical: ``X_i' = X_i X_o^-1``."""
    extrinsics = list(extrinsics)
    if not extrinsics:
        raise CamGeoError("no extrinsics to randomize")
    o = int(rng.integers(len(extrinsics)))
    inv = extrinsics[o].inverse()
    return [Pose.identity() if k == o else compose(X, inv) for k, X in enumerate(extrinsics)], o


def _depth_l1_log(pred, gt, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError("depth shapes differ")
    m = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(pred[m] <= 0) or np.any(gt[m] <= 0):
        raise CamGeoError("log depth loss needs positive depths on the mask")
    return float(np.mean(np.abs(np.log(gt[m]) - np.log(pred[m]))))


def _rgb_l2(pred, gt, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError("image shapes differ")
    sq = np.sum((pred - gt) ** 2, axis=-1)
    return float(np.mean(sq if mask is None else sq[np.asarray(mask, dtype=bool)]))


@dataclass(frozen=True)
class SupervisionLosses:
    depth: float
    synthesis: float
    depth_virtual: float
    synthesis_virtual: float
    total: float


def supervision_losses(pred_depth, gt_depth, pred_rgb, gt_rgb, lambda_s: float = 5.0, lambda_v: float = 0.5, virtual=None, mask=None) -> SupervisionLosses:
    """``L_d + lambda_s L_s + lambda_v (L_dv + lambda_s L_sv)``.

    ``virtual`` is an optional ``(pred_depth, gt_depth, pred_rgb, gt_rgb, mask)``
    tuple for virtual-camera supervision; ``mask`` restricts every term to
    pixels with ground truth.
    """
    Ld = _depth_l1_log(pred_depth, gt_depth, mask)
    Ls = _rgb_l2(pred_rgb, gt_rgb, mask)
    Ldv = Lsv = 0.0
    if virtual is not None:
        vpd, vgd, vpr, vgr, *rest = virtual
        vmask = rest[0] if rest else None
        Ldv = _depth_l1_log(vpd, vgd, vmask)
        Lsv = _rgb_l2(vpr, vgr, vmask)
    total = Ld + lambda_s * Ls + lambda_v * (Ldv + lambda_s * Lsv)
    return SupervisionLosses(Ld, Ls, Ldv, Lsv, total)


def write_embedding(path, emb) -> None:
    """Text header line ``CAMEMB H W C`` then float32 little-endian values."""
    emb = np.asarray(emb)
    if emb.ndim != 3:
        raise ShapeError("embedding must be (H, W, C)")
    H, W, C = emb.shape
    with open(path, "wb") as fh:
        fh.write(f"{HEADER_TAG} {H} {W} {C}\n".encode("ascii"))
        fh.write(emb.astype("<f4").tobytes())


def read_embedding(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    parts = data[:nl].decode("ascii", "replace").split() if nl > 0 else []
    if len(parts) != 4 or parts[0] != HEADER_TAG:
        raise FormatError("bad embedding header", path, 1)
    H, W, C = (int(x) for x in parts[1:])
    body = data[nl + 1 :]
    if len(body) != 4 * H * W * C:
        raise FormatError(f"expected {4 * H * W * C} payload bytes, found {len(body)}", path)
    return np.frombuffer(body, dtype="<f4").reshape(H, W, C)
