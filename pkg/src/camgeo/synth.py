"""Synthetic scenes with exact ground truth.

Calibration targets, analytically textured planes and boxes, multi-camera
rigs and equirectangular scans. Every renderer evaluates the texture at
the exact ray/surface intersection, so images carry no resampling error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .calibrate import CorrespondenceSet, View
from .cameras import CameraModel
from .errors import CamGeoError
from .geometry import Pose, compose
from .multicam import Rig
from .photometric import DepthMap, pixel_grid
from .scanproc import Panorama, equirect_directions


def checkerboard_points(cols: int = 9, rows: int = 6, square: float = 0.04) -> np.ndarray:
    """Inner-corner grid on the z = 0 plane, centered at the origin."""
    j, i = np.meshgrid(np.arange(cols), np.arange(rows))
    x = (j.ravel() - (cols - 1) / 2) * square
    y = (i.ravel() - (rows - 1) / 2) * square
    return np.stack([x, y, np.zeros_like(x)], axis=-1)


def _frame_around(n, psi):
    """Orthonormal columns [e1, e2, n] with in-plane angle ``psi``."""
    n = n / np.linalg.norm(n)
    a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    c, s = np.cos(psi), np.sin(psi)
    return np.stack([c * e1 + s * e2, -s * e1 + c * e2, n], axis=1)


def _visible(model: CameraModel, X, size, margin=1.0):
    W, H = size
    uv, ok = model.project_with_mask(X)
    return bool(
        np.all(ok)
        and np.all(uv[:, 0] >= margin)
        and np.all(uv[:, 0] <= W - 1 - margin)
        and np.all(uv[:, 1] >= margin)
        and np.all(uv[:, 1] <= H - 1 - margin)
    )


def random_target_pose(model: CameraModel, points, size, rng, dist=(0.3, 0.8), max_off_axis_deg=75.0, max_tilt_deg=40.0, tries=2000) -> Pose:
    """Pose placing the whole target inside the image, in front of the lens."""
    for _ in range(tries):
        theta = np.radians(max_off_axis_deg) * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        d = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
        center = rng.uniform(*dist) * d
        tilt = Rotation.from_rotvec(np.radians(max_tilt_deg) * rng.uniform() * _unit_perp(d, rng))
        R = _frame_around(tilt.apply(d), rng.uniform(0, 2 * np.pi))
        pose = Pose(R, center)
        if _visible(model, pose.apply(points), size):
            return pose
    raise CamGeoError("could not place the target inside the image")


def _unit_perp(d, rng):
    v = np.cross(d, rng.normal(size=3))
    return v / np.linalg.norm(v)


def calibration_views(model: CameraModel, size, n_views: int = 20, noise: float = 0.2, seed: int = 0, cols: int = 9, rows: int = 6, square: float = 0.04, **pose_kw) -> tuple[CorrespondenceSet, list[Pose]]:
    """Checkerboard observations with Gaussian pixel noise; views carry no pose."""
    rng = np.random.default_rng(seed)
    board = checkerboard_points(cols, rows, square)
    views, poses = [], []
    for _ in range(n_views):
        pose = random_target_pose(model, board, size, rng, **pose_kw)
        uv = model.project(pose.apply(board)) + rng.normal(scale=noise, size=(len(board), 2))
        views.append(View(board, uv))
        poses.append(pose)
    return CorrespondenceSet(tuple(views)), poses


# textures ----------------------------------------------------------------------


def smooth_texture(points, seed: int = 0, n_waves: int = 12, scale: float = 1.0) -> np.ndarray:
    """Band-limited color field in [0.05, 0.95] evaluated at 3D points."""
    rng = np.random.default_rng(seed)
    P = np.asarray(points, dtype=np.float64)
    out = np.full(P.shape[:-1] + (3,), 0.5)
    for _ in range(n_waves):
        k = rng.normal(size=3)
        k *= rng.uniform(2.0, 9.0) / np.linalg.norm(k) / scale
        amp = rng.uniform(0.02, 0.06, size=3)
        ph = rng.uniform(0, 2 * np.pi)
        out += amp * np.sin(P @ k + ph)[..., None]
    return np.clip(out, 0.05, 0.95)


# ray casting ---------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float  # n . X = offset

    def intersect(self, o, d):
        n = np.asarray(self.normal, dtype=np.float64)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.offset - o @ n) / den
        return np.where((np.abs(den) > 1e-12) & (s > 0), s, np.inf)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def intersect(self, o, d):
        """Distance along unit rays to the box surface (inside or outside)."""
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = tmax >= np.maximum(tmin, 0)
        s = np.where(tmin > 0, tmin, tmax)
        return np.where(hit & (s > 0), s, np.inf)


def cast(camera: CameraModel, pose: Pose, size, surfaces) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World hit points, hit mask and surface index for every pixel."""
    W, H = size
    X, ok = camera.unproject_with_mask(pixel_grid(H, W))
    d_cam = X / np.linalg.norm(X, axis=-1, keepdims=True)
    d = d_cam @ pose.rotation  # camera -> world directions
    o = pose.center
    dist = np.stack([s.intersect(o, d) for s in surfaces], axis=0)
    idx = np.argmin(dist, axis=0)
    s = np.take_along_axis(dist, idx[None], axis=0)[0]
    hit = ok & np.isfinite(s)
    s = np.where(hit, s, 0.0)
    return o + s[..., None] * d, hit, np.where(hit, idx, -1)


def render(camera: CameraModel, pose: Pose, size, surfaces, texture_seed: int = 0, background: float = 0.0):
    """Image and depth (in ``camera.depth_kind`` units) of a surface scene."""
    P, hit, idx = cast(camera, pose, size, surfaces)
    img = np.where(hit[..., None], smooth_texture(P, texture_seed), background)
    depth = np.where(hit, camera.depth_of(pose.apply(P)), 0.0)
    return img, DepthMap(depth, hit), idx


# equirectangular scans ------------------------------------------------------------


def surface_panorama(H: int, W: int, surfaces, seed: int = 0) -> Panorama:
    """Range scan from the origin; rays that hit nothing return 0."""
    d = equirect_directions(H, W)
    s = np.min(np.stack([srf.intersect(np.zeros(3), d) for srf in surfaces]), axis=0)
    hit = np.isfinite(s)
    rng_m = np.where(hit, s, 0.0)
    rgb = np.where(hit[..., None], smooth_texture(d * rng_m[..., None], seed), 0.0)
    return Panorama(rgb, rng_m)


def plane_panorama(H: int, W: int, normal, offset: float, seed: int = 0) -> Panorama:
    return surface_panorama(H, W, [Plane(np.asarray(normal, float), offset)], seed)


# scenes used by tests and the CLI ---------------------------------------------------


def tilted_plane(distance: float = 4.0, tilt=(0.1, -0.05)) -> Plane:
    """Plane in front of the origin facing back toward it."""
    n = np.array([tilt[0], tilt[1], -1.0])
    n /= np.linalg.norm(n)
    return Plane(n, -distance * abs(n[2]))


def room(lo=(-6.0, -4.0, -3.0), hi=(6.0, 4.0, 20.0)) -> Box:
    return Box(np.asarray(lo, float), np.asarray(hi, float))


def yaw_rig(camera: CameraModel, yaws_deg, baseline: float = 0.0):
    """Cameras on a ring, each yawed about the vertical (camera y) axis."""
    ext = []
    for k, yaw in enumerate(yaws_deg):
        R = Rotation.from_euler("y", np.radians(-yaw)).as_matrix()
        center = baseline * np.array([np.sin(np.radians(yaw)), 0.0, np.cos(np.radians(yaw))]) if baseline else np.zeros(3)
        ext.append(Pose(R, -R @ center))
    return Rig(tuple(camera for _ in yaws_deg), tuple(ext), 0)


def body_motion(step: float, forward=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-body pose of a body displaced by ``step`` along ``forward``."""
    return Pose(np.eye(3), -step * np.asarray(forward, float))


def ego_motion(extrinsic: Pose, body_t: Pose, body_c: Pose) -> Pose:
    """Camera ego-motion (frame at t to frame at c) induced by a rigid body move."""
    return compose(compose(extrinsic, compose(body_c, body_t.inverse())), extrinsic.inverse())


# ray-field generators ---------------------------------------------------------------


def catadioptric_rays(p, H: int, W: int, max_deg: float = 125.0) -> np.ndarray:
    """Mirror-like radial field: the polar angle grows linearly with image
    radius and passes 90 deg, so peripheral rays point backwards (z < 0)."""
    p = np.asarray(p, dtype=np.float64)
    x = (p[..., 0] - (W - 1) / 2) / (W / 2)
    y = (p[..., 1] - (H - 1) / 2) / (W / 2)
    th = np.radians(max_deg) * np.hypot(x, y)
    ph = np.arctan2(y, x)
    return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)


def ray_correspondences(directions_of, H: int, W: int, n: int, seed: int = 0, depth=(1.0, 20.0)):
    """Random sub-pixel locations paired with points along their true rays."""
    rng = np.random.default_rng(seed)
    p = rng.uniform([0, 0], [W - 1, H - 1], size=(n, 2))
    d = directions_of(p)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return p, d * rng.uniform(*depth, size=(n, 1))
