"""Multi-camera rig geometry.

Extrinsic ``X_i`` maps canonical-frame points into camera ``i``. The
relative pose ``X_{i->j} = X_j X_i^-1`` maps camera-``i`` points into
camera ``j``. Ego-motion ``X^{t->c}`` of a camera maps its frame at the
target time into its frame at the context time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import CameraModel, camera_from_dict
from .errors import CamGeoError, FormatError, ShapeError
from .geometry import Pose, compose, wrap_angle
from .photometric import DepthMap, WarpField, lift, sample_nearest, warp_points

SPATIAL_WEIGHT = 0.1
TEMPORAL_WEIGHT = 1.0


@dataclass(frozen=True, eq=False)
class Rig:
    cameras: tuple[CameraModel, ...]
    extrinsics: tuple[Pose, ...]
    canonical_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "extrinsics", tuple(self.extrinsics))
        if len(self.cameras) != len(self.extrinsics) or not self.cameras:
            raise ShapeError("rig needs one extrinsic per camera and at least one camera")
        if not 0 <= self.canonical_index < len(self.cameras):
            raise CamGeoError("canonical index out of range")

    def __len__(self):
        return len(self.cameras)

    def relative(self, i: int, j: int) -> Pose:
        """Pose taking camera-``i`` points into camera ``j``."""
        if i == j:
            return Pose.identity()
        return compose(self.extrinsics[j], self.extrinsics[i].inverse())

    def canonicalize(self, index: int | None = None) -> Rig:
        """Re-express extrinsics so camera ``index`` becomes the identity."""
        index = self.canonical_index if index is None else index
        ref_inv = self.extrinsics[index].inverse()
        ext = [Pose.identity() if k == index else compose(X, ref_inv) for k, X in enumerate(self.extrinsics)]
        return Rig(self.cameras, tuple(ext), index)


def warp_spatial(depth_i: DepthMap, rig: Rig, i: int, j: int, src_shape=None) -> WarpField:
    """Target pixels of camera ``i`` located in camera ``j`` at the same time."""
    X, ok = lift(depth_i, rig.cameras[i])
    return warp_points(X, ok, rig.relative(i, j), rig.cameras[j], depth_i.shape if src_shape is None else src_shape)


def spatiotemporal_pose(rig: Rig, i: int, j: int, ego_i: Pose) -> Pose:
    """Camera ``i`` at time t to camera ``j`` at time c: ego-motion, then extrinsics."""
    return compose(rig.relative(i, j), ego_i)


def warp_spatiotemporal(depth_i: DepthMap, rig: Rig, i: int, j: int, ego_i: Pose, src_shape=None) -> WarpField:
    """Warp through camera ``i``'s ego-motion then the ``i -> j`` extrinsics.

    With identity ego-motion the composed pose equals the relative
    extrinsic bit for bit, and with ``i == j`` it equals ``ego_i``.
    """
    X, ok = lift(depth_i, rig.cameras[i])
    pose = spatiotemporal_pose(rig, i, j, ego_i)
    return warp_points(X, ok, pose, rig.cameras[j], depth_i.shape if src_shape is None else src_shape)


def to_canonical(pred: Pose, rig: Rig, i: int, j: int) -> Pose:
    """Express camera ``i``'s ego-motion in camera ``j``'s frame.

    ``X~ = X_j X_i^-1 X^ X_i X_j^-1``.
    """
    rel = rig.relative(i, j)
    return compose(compose(rel, pred), rel.inverse())


@dataclass(frozen=True)
class ConsistencyLosses:
    translation: float
    rotation: float
    combined: float


def pose_consistency_losses(preds, rig: Rig, alpha_t: float = 1.0, alpha_r: float = 1.0) -> ConsistencyLosses:
    """Squared disagreement between the canonical camera's motion and the others'."""
    if len(preds) != len(rig) or len(rig) < 2:
        raise CamGeoError("need one predicted pose per camera and at least two cameras")
    c = rig.canonical_index
    ref = preds[c]
    ref_euler = ref.euler()
    t_loss = 0.0
    r_loss = 0.0
    for k, pred in enumerate(preds):
        if k == c:
            continue
        conv = to_canonical(pred, rig, k, c)
        t_loss += float(np.sum((ref.translation - conv.translation) ** 2))
        r_loss += float(np.sum(wrap_angle(ref_euler - conv.euler()) ** 2))
    return ConsistencyLosses(t_loss, r_loss, alpha_t * t_loss + alpha_r * r_loss)


def nonoverlap_mask(field: WarpField, src_shape) -> np.ndarray:
    """Pixels whose warp lands on the context image (unit-image test)."""
    ones = np.ones(tuple(src_shape[:2]))
    warped, inside = sample_nearest(ones, field)
    return (warped == 1) & inside


def overlap_fraction(field: WarpField, src_shape) -> float:
    return float(np.mean(nonoverlap_mask(field, src_shape)))


def masked_photometric(loss_map, no_mask=None, so_mask=None) -> np.ndarray:
    L = np.asarray(loss_map, dtype=np.float64)
    out = L.copy()
    for m in (no_mask, so_mask):
        if m is None:
            continue
        m = np.asarray(m, dtype=bool)
        if m.shape != L.shape:
            raise ShapeError(f"mask shape {m.shape} != loss shape {L.shape}")
        out = np.where(m, out, 0.0)
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray  # [0, 1]
    camera: np.ndarray  # source camera index per point

    def __len__(self):
        return len(self.points)

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise CamGeoError("empty pointcloud")
        return self.points.mean(axis=0)

    @classmethod
    def concatenate(cls, clouds) -> PointCloud:
        clouds = list(clouds)
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.camera for c in clouds]),
        )


def assemble_pointcloud(rig: Rig, depths, images=None) -> PointCloud:
    """Lift every valid pixel of every camera into the canonical frame."""
    if len(depths) != len(rig):
        raise ShapeError("need one depth map per camera")
    pts, cols, ids = [], [], []
    for k, depth in enumerate(depths):
        X, ok = lift(depth, rig.cameras[k])
        pts.append(rig.extrinsics[k].inverse().apply(X[ok]))
        if images is not None:
            img = np.asarray(images[k], dtype=np.float64)
            cols.append(img[ok] if img.ndim == 3 else np.repeat(img[ok][:, None], 3, axis=1))
        else:
            cols.append(np.full((int(ok.sum()), 3), 0.5))
        ids.append(np.full(int(ok.sum()), k))
    return PointCloud(np.concatenate(pts), np.concatenate(cols), np.concatenate(ids))


def shared_median_scale(preds, gts) -> float:
    """One scale from the medians of all cameras' valid depths pooled together."""
    p_all, g_all = [], []
    for pred, gt in zip(preds, gts, strict=True):
        p = pred.depth if isinstance(pred, DepthMap) else np.asarray(pred, dtype=np.float64)
        g = gt.depth if isinstance(gt, DepthMap) else np.asarray(gt, dtype=np.float64)
        ok = (g > 0) & (p > 0) & np.isfinite(g) & np.isfinite(p)
        if isinstance(gt, DepthMap):
            ok &= gt.valid
        if isinstance(pred, DepthMap):
            ok &= pred.valid
        p_all.append(p[ok])
        g_all.append(g[ok])
    p_all = np.concatenate(p_all) if p_all else np.empty(0)
    g_all = np.concatenate(g_all) if g_all else np.empty(0)
    if len(p_all) == 0:
        raise CamGeoError("no valid pixels for median scaling")
    return float(np.median(g_all) / np.median(p_all))


# rig files --------------------------------------------------------------------


def rig_to_dict(rig: Rig, camera_files=None) -> dict:
    cams = []
    for k, (cam, X) in enumerate(zip(rig.cameras, rig.extrinsics)):
        entry = {"camera": camera_files[k] if camera_files else cam.to_dict(), "extrinsic": X.to_text()}
        cams.append(entry)
    return {"canonical_index": rig.canonical_index, "cameras": cams}


def rig_from_dict(d: dict, base_dir=None, path=None) -> Rig:
    try:
        entries = d["cameras"]
        canonical = int(d.get("canonical_index", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad rig document: {exc}", path) from None
    cams, exts = [], []
    for k, entry in enumerate(entries):
        spec = entry.get("camera")
        try:
            if isinstance(spec, str):
                cam_path = Path(base_dir or ".") / spec
                cams.append(camera_from_dict(json.loads(cam_path.read_text())))
            else:
                cams.append(camera_from_dict(spec))
            exts.append(Pose.from_text(entry["extrinsic"]))
        except (CamGeoError, KeyError, OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"camera entry {k}: {exc}", path) from None
    return Rig(tuple(cams), tuple(exts), canonical)


def load_rig(path) -> Rig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    return rig_from_dict(d, path.parent, path)


def save_rig(rig: Rig, path, camera_files=None) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig, camera_files), indent=2) + "\n")
