"""Survey-scan post-processing: rectified crops from an equirectangular
range scan and RANSAC surface normals.

Panorama convention: z is up, azimuth is measured from +x toward +y, row 0
is the top. Crop depth is Euclidean range along each crop ray; use
:func:`range_to_z` for planar depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import trim_mean

from .cameras import Pinhole
from .errors import CamGeoError, ShapeError
from .geometry import Pose
from .photometric import DepthMap, pixel_grid

NEAREST_RGB = 5
DEPTH_RADIUS_DEG = 0.5
TRIM = 0.1  # drop 10% on each side -> central 80%
NORMAL_WINDOW = 11
MIN_INLIER_FRAC = 0.4
RANSAC_ITERS = 100
THRESH_NEAR = (1.0, 0.2e-3)  # (range m, threshold m)
THRESH_FAR = (300.0, 0.06)


def equirect_directions(H: int, W: int, el_top: float = 90.0, el_bottom: float = -90.0) -> np.ndarray:
    """Unit ray of every pixel center of an equirectangular grid, (H, W, 3)."""
    el = np.radians(el_top - (np.arange(H) + 0.5) * (el_top - el_bottom) / H)
    az = (np.arange(W) + 0.5) * 2 * np.pi / W - np.pi
    el, az = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


@dataclass(frozen=True, eq=False)
class Panorama:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    range: np.ndarray  # (H, W) metres, 0 = no return
    el_top: float = 90.0  # elevation of the top edge, degrees
    el_bottom: float = -90.0

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        rng = np.asarray(self.range, dtype=np.float64)
        if rgb.shape[:2] != rng.shape or rgb.ndim != 3:
            raise ShapeError("panorama color and range must share (H, W)")
        if np.any(rng < 0) or not np.all(np.isfinite(rng)):
            raise CamGeoError("panorama ranges must be finite and non-negative")
        if not self.el_top > self.el_bottom:
            raise CamGeoError("panorama top elevation must exceed bottom")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "range", rng)

    @property
    def shape(self):
        return self.range.shape

    @property
    def valid(self) -> np.ndarray:
        return self.range > 0

    @property
    def angular_resolution(self) -> float:
        """Azimuthal pixel pitch in degrees."""
        return 360.0 / self.shape[1]

    def directions(self) -> np.ndarray:
        return equirect_directions(*self.shape, self.el_top, self.el_bottom)

    def points(self) -> np.ndarray:
        return self.directions() * self.range[..., None]


@dataclass(frozen=True)
class CropSpec:
    azimuth: float  # degrees
    elevation: float  # degrees
    width: int = 64
    height: int = 48
    fov_h: float = 60.0
    fov_v: float = 45.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or not (0 < self.fov_h < 180 and 0 < self.fov_v < 180):
            raise CamGeoError("crop size and field of view must be positive (fov < 180)")

    def camera(self) -> Pinhole:
        fx = (self.width / 2) / np.tan(np.radians(self.fov_h) / 2)
        fy = (self.height / 2) / np.tan(np.radians(self.fov_v) / 2)
        return Pinhole(float(fx), float(fy), (self.width - 1) / 2, (self.height - 1) / 2)

    def pose(self) -> Pose:
        """World-to-crop-camera rotation (+z along the crop center, +y down)."""
        az, el = np.radians(self.azimuth), np.radians(self.elevation)
        f = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        up = np.array([0.0, 0.0, 1.0]) if abs(abs(f[2]) - 1) > 1e-6 else np.array([0.0, 1.0, 0.0])
        x = np.cross(f, up)
        x /= np.linalg.norm(x)
        y = np.cross(f, x)
        return Pose(np.stack([x, y, f]), np.zeros(3))

    def rays(self) -> np.ndarray:
        """Unit world-frame ray of every crop pixel, (height, width, 3)."""
        X, _ = self.camera().unproject_with_mask(pixel_grid(self.height, self.width))
        X /= np.linalg.norm(X, axis=-1, keepdims=True)
        return X @ self.pose().rotation


def _chord(deg: float) -> float:
    return 2.0 * np.sin(np.radians(deg) / 2.0)


def _check_coverage(pano: Panorama, rays: np.ndarray) -> None:
    el = np.degrees(np.arcsin(np.clip(rays[..., 2], -1, 1)))
    if el.max() > pano.el_top + 1e-9 or el.min() < pano.el_bottom - 1e-9:
        raise CamGeoError(
            f"crop spans elevations [{el.min():.2f}, {el.max():.2f}] deg outside panorama coverage "
            f"[{pano.el_bottom}, {pano.el_top}]"
        )


def extract_crop(pano: Panorama, spec: CropSpec) -> tuple[np.ndarray, DepthMap]:
    """Rectified pinhole crop: color from the 5 angularly nearest panorama
    pixels, range from the trimmed mean of valid returns within 0.5 deg."""
    rays = spec.rays()
    _check_coverage(pano, rays)
    dirs = pano.directions().reshape(-1, 3)
    q = rays.reshape(-1, 3)

    _, nn = cKDTree(dirs).query(q, k=NEAREST_RGB)
    rgb = pano.rgb.reshape(-1, 3)[nn].mean(axis=1)

    valid_idx = np.flatnonzero(pano.valid.ravel())
    depth = np.zeros(len(q))
    if len(valid_idx):
        ranges = pano.range.ravel()[valid_idx]
        hits = cKDTree(dirs[valid_idx]).query_ball_point(q, _chord(DEPTH_RADIUS_DEG))
        for k, h in enumerate(hits):
            if h:
                depth[k] = trim_mean(ranges[h], TRIM)
    depth = depth.reshape(spec.height, spec.width)
    return rgb.reshape(spec.height, spec.width, 3), DepthMap(depth, depth > 0)


def range_to_z(depth: DepthMap, spec: CropSpec) -> DepthMap:
    """Convert range along crop rays to planar depth of the crop camera."""
    X, _ = spec.camera().unproject_with_mask(pixel_grid(spec.height, spec.width))
    cos = 1.0 / np.linalg.norm(X, axis=-1)
    return DepthMap(np.where(depth.valid, depth.depth * cos, 0.0), depth.valid)


def adaptive_threshold(r):
    """Inlier distance growing linearly with range between the two anchors."""
    (r0, t0), (r1, t1) = THRESH_NEAR, THRESH_FAR
    return np.clip(t0 + (np.asarray(r, dtype=np.float64) - r0) * (t1 - t0) / (r1 - r0), t0, t1)


def _plane_normal(X: np.ndarray, rng: np.random.Generator, iters: int, min_frac: float) -> np.ndarray:
    n_pts = len(X)
    if n_pts < 3:
        return np.zeros(3)
    med = np.median(X, axis=0)
    anchor = X[np.argmin(np.sum((X - med) ** 2, axis=1))]
    others = np.flatnonzero(np.any(X != anchor, axis=1))
    if len(others) < 2:
        return np.zeros(3)
    thr = adaptive_threshold(np.linalg.norm(anchor))
    # planes through the anchor and two random members
    a = rng.integers(0, len(others), size=iters)
    b = rng.integers(0, len(others) - 1, size=iters)
    b = b + (b >= a)  # distinct pair without rejection
    normals = np.cross(X[others[a]] - anchor, X[others[b]] - anchor)
    norms = np.linalg.norm(normals, axis=1)
    good = norms > 1e-12 * max(np.max(norms), 1e-300)
    if not np.any(good):
        return np.zeros(3)
    normals = normals[good] / norms[good, None]
    resid = np.abs((X - anchor) @ normals.T)  # (n_pts, hyps)
    counts = np.sum(resid < thr, axis=0)
    best = int(np.argmax(counts))
    if counts[best] < min_frac * n_pts:
        return np.zeros(3)
    inl = X[resid[:, best] < thr]
    # least-squares refit on the consensus set
    _, _, Vt = np.linalg.svd(inl - inl.mean(axis=0))
    n = Vt[-1]
    if n @ anchor > 0:  # face the scanner at the origin
        n = -n
    return n


def estimate_normals(points, valid, seed: int = 0, window: int = NORMAL_WINDOW, iters: int = RANSAC_ITERS, min_inlier_frac: float = MIN_INLIER_FRAC) -> np.ndarray:
    """Per-pixel unit normal from a RANSAC plane over the surrounding window.

    Each pixel draws from its own generator seeded by ``(seed, row, col)``
    so results do not depend on evaluation order. Pixels without a
    consensus plane get the zero vector.
    """
    P = np.asarray(points, dtype=np.float64)
    m = np.asarray(valid, dtype=bool)
    if P.shape[:2] != m.shape or P.shape[-1] != 3:
        raise ShapeError("points must be (H, W, 3) with an (H, W) mask")
    H, W = m.shape
    half = window // 2
    out = np.zeros((H, W, 3))
    for i in range(H):
        r0, r1 = max(0, i - half), min(H, i + half + 1)
        for j in range(W):
            if not m[i, j]:
                continue
            c0, c1 = max(0, j - half), min(W, j + half + 1)
            X = P[r0:r1, c0:c1][m[r0:r1, c0:c1]]
            rng = np.random.default_rng([seed, i, j])
            out[i, j] = _plane_normal(X, rng, iters, min_inlier_frac)
    return out
