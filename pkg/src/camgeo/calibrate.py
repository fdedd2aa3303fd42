"""Target-based calibration from 2D-3D correspondences.

Linear DLT + RQ decomposition for pinhole initialization, a
Levenberg-Marquardt refinement over intrinsics and per-view poses for any
camera model, reprojection statistics, perturbation-recovery runs and
rectification.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import rq
from scipy.spatial.transform import Rotation

from .cameras import CameraModel, Pinhole, param_jacobian
from .errors import CamGeoError, DegenerateError, FormatError, OutOfDomainError, ShapeError
from .geometry import Pose, homogenize, skew
from .photometric import pixel_grid, sample_bilinear

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class View:
    points: np.ndarray  # (N, 3) target frame
    pixels: np.ndarray  # (N, 2)
    pose: Pose | None = None

    def __post_init__(self):
        P = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        p = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if len(P) != len(p):
            raise ShapeError(f"{len(P)} points but {len(p)} pixels")
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "pixels", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    views: tuple[View, ...]

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if not self.views:
            raise CamGeoError("correspondence set has no views")

    @property
    def n_points(self) -> int:
        return sum(len(v) for v in self.views)

    def without_poses(self) -> CorrespondenceSet:
        return CorrespondenceSet(tuple(View(v.points, v.pixels) for v in self.views))


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 200
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    step_tol: float = 1e-10
    cost_tol: float = 1e-12  # relative decrease of the mean squared error
    cost_floor: float = 1e-20
    seed: int = 0

    def __post_init__(self):
        for name in ("max_iters", "damping", "damping_up", "damping_down", "step_tol", "cost_tol"):
            if not getattr(self, name) > 0:
                raise CamGeoError(f"optimizer {name} must be positive")


@dataclass
class CalibrationResult:
    model: CameraModel
    poses: list[Pose]
    mre: float  # mean squared reprojection error, px^2
    rms: float  # sqrt(mre), px
    iterations: int
    converged: bool
    per_view_rms: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    relative_errors: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "model": self.model.to_dict(),
            "mre_px2": self.mre,
            "rms_px": self.rms,
            "per_view_rms_px": self.per_view_rms,
            "iterations": self.iterations,
            "converged": self.converged,
            "poses": [p.matrix.tolist() for p in self.poses],
            "diagnostics": self.diagnostics,
        }
        if self.relative_errors is not None:
            out["relative_errors"] = self.relative_errors
        return out


# linear initialization -----------------------------------------------------


def _normalizer(x: np.ndarray) -> np.ndarray:
    """Similarity taking points to zero mean and RMS norm sqrt(dim)."""
    d = x.shape[1]
    c = x.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((x - c) ** 2, axis=1)))
    if rms < 1e-12:
        raise DegenerateError("all points coincide")
    s = np.sqrt(d) / rms
    T = np.eye(d + 1)
    T[:d, :d] *= s
    T[:d, d] = -s * c
    return T


def dlt_projection_matrix(points, pixels) -> np.ndarray:
    """3x4 projection matrix from >= 6 non-coplanar correspondences, ``||M||_F = 1``."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(P) != len(p):
        raise ShapeError("points and pixels differ in length")
    if len(P) < 6:
        raise DegenerateError(f"DLT needs at least 6 correspondences, got {len(P)}")
    T3 = _normalizer(P)
    T2 = _normalizer(p)
    X = homogenize(P) @ T3.T
    x = homogenize(p) @ T2.T
    n = len(P)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -x[:, 0:1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -x[:, 1:2] * X
    _, S, Vt = np.linalg.svd(A)
    if S[10] / S[0] < 1e-9:
        raise DegenerateError("DLT design matrix is rank deficient (coplanar or degenerate points)")
    M = np.linalg.inv(T2) @ Vt[-1].reshape(3, 4) @ T3
    return M / np.linalg.norm(M)


def decompose_projection(M) -> tuple[np.ndarray, Pose]:
    """Split ``M ~ K [R | t]`` with positive-diagonal K (K33 = 1) and det R = +1."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (3, 4):
        raise ShapeError("projection matrix must be 3x4")
    A = M[:, :3]
    if abs(np.linalg.det(A)) < 1e-12 * np.linalg.norm(A) ** 3:
        raise DegenerateError("left 3x3 block of the projection matrix is singular")
    if np.linalg.det(A) < 0:
        M = -M
        A = -A
    K, R = rq(A)
    D = np.diag(np.sign(np.diag(K)))
    K = K @ D
    R = D @ R
    t = np.linalg.solve(K, M[:, 3])
    K = K / K[2, 2]
    return K, Pose(R, t)


def _nullvec_bearing(bearings, X, k):
    """Least-squares A (3 x k) with bearings parallel to A @ X."""
    A = np.einsum("nri,nj->nrij", skew(bearings), X).reshape(3 * len(X), 3 * k)
    _, S, Vt = np.linalg.svd(A)
    return Vt[-1].reshape(3, k), S


def _nearest_rotation(A):
    U, s, Vt = np.linalg.svd(A)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R, s


def estimate_pose(model: CameraModel, points, pixels) -> Pose:
    """Initial target-to-camera pose from bearings of ``model``.

    Pixels are unprojected to unit bearings and a linear system
    ``b x (R P + t) = 0`` is solved; planar targets use the 3x3 plane
    homography form. Works for fields of view beyond 180 degrees.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    B, ok = model.unproject_with_mask(np.asarray(pixels, dtype=np.float64).reshape(-1, 2))
    P, B = P[ok], B[ok]
    if len(P) < 4:
        raise DegenerateError("too few unprojectable pixels to initialize a pose")
    B = B / np.linalg.norm(B, axis=1, keepdims=True)
    c = P.mean(axis=0)
    U, S, Vt = np.linalg.svd(P - c)
    scale = S[0] / np.sqrt(len(P))
    planar = S[2] < 1e-9 * S[0]
    if planar:
        u1, u2 = Vt[0], Vt[1]
        xy = (P - c) @ np.stack([u1, u2], axis=1) / scale
        H, _ = _nullvec_bearing(B, homogenize(xy), 3)
        lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
        H = H * lam
        if np.mean(np.sum(B * (homogenize(xy) @ H.T), axis=1)) < 0:
            H = -H
        h1, h2 = H[:, 0], H[:, 1]
        R, _ = _nearest_rotation(np.stack([h1, h2, np.cross(h1, h2)], axis=1) @ np.stack([u1, u2, np.cross(u1, u2)]))
        t = H[:, 2] * scale - R @ c
    else:
        Xn = homogenize((P - c) / scale)
        A, _ = _nullvec_bearing(B, Xn, 4)
        if np.linalg.det(A[:, :3]) < 0:
            A = -A
        R, s = _nearest_rotation(A[:, :3])
        A = A / s.mean()
        t = A[:, 3] * scale - R @ c
        if np.mean(np.sum(B * (P @ R.T + t), axis=1)) < 0:
            raise DegenerateError("pose initialization put the target behind the camera")
    return Pose(R, t)


# reprojection ----------------------------------------------------------------


@dataclass(frozen=True)
class ReprojectionStats:
    mse: float
    rms: float
    n_used: int
    n_excluded: int
    per_view_rms: tuple[float, ...]


def reprojection_stats(model: CameraModel, poses, corrs: CorrespondenceSet) -> ReprojectionStats:
    """Mean squared and RMS reprojection error; unprojectable points are excluded and counted."""
    if len(poses) != len(corrs.views):
        raise ShapeError("need one pose per view")
    sq_all = []
    per_view = []
    excluded = 0
    for pose, view in zip(poses, corrs.views):
        uv, ok = model.project_with_mask(pose.apply(view.points))
        sq = np.sum((uv[ok] - view.pixels[ok]) ** 2, axis=1)
        excluded += int(np.count_nonzero(~ok))
        sq_all.append(sq)
        per_view.append(float(np.sqrt(sq.mean())) if len(sq) else float("nan"))
    sq = np.concatenate(sq_all)
    if len(sq) == 0:
        raise OutOfDomainError("no projectable correspondences")
    mse = float(np.mean(sq))
    return ReprojectionStats(mse, float(np.sqrt(mse)), len(sq), excluded, tuple(per_view))


def mean_reprojection_error(model: CameraModel, poses, corrs: CorrespondenceSet) -> float:
    """``(1/N) sum ||pi(P_i) - p_i||^2`` in px^2."""
    return reprojection_stats(model, poses, corrs).mse


# Levenberg-Marquardt ------------------------------------------------------------


def _point_jacobian(model: CameraModel, X: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera-frame point), central differences, (N, 2, 3)."""
    h = 1e-6 * np.maximum(1.0, np.linalg.norm(X, axis=1))[:, None]
    cols = []
    for k in range(3):
        e = np.zeros_like(X)
        e[:, k] = h[:, 0]
        plus, _ = model.project_with_mask(X + e)
        minus, _ = model.project_with_mask(X - e)
        cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=-1)


class _Problem:
    def __init__(self, corrs: CorrespondenceSet, masks):
        self.views = corrs.views
        self.masks = masks
        self.P = [v.points[m] for v, m in zip(self.views, masks)]
        self.p = [v.pixels[m] for v, m in zip(self.views, masks)]
        self.n = sum(len(x) for x in self.P)

    def residuals(self, model, poses):
        res = []
        for pose, P, p in zip(poses, self.P, self.p):
            uv, ok = model.project_with_mask(pose.apply(P))
            if not np.all(ok):
                return None
            res.append((uv - p).ravel())
        return np.concatenate(res)

    def jacobian(self, model, poses):
        n_int = model.params().size
        V = len(poses)
        J = np.zeros((2 * self.n, n_int + 6 * V))
        row = 0
        for k, (pose, P) in enumerate(zip(poses, self.P)):
            if len(P) == 0:
                continue
            RP = P @ pose.rotation.T
            X = RP + pose.translation
            Ji = param_jacobian(model, X)
            Jx = _point_jacobian(model, X)
            # left-multiplied rotation increment: d(exp(w) R P)/dw = -[R P]_x
            dX = np.zeros((len(P), 3, 6))
            dX[:, :, :3] = -skew(RP)
            dX[:, :, 3:] = np.eye(3)
            Jp = np.einsum("nij,njk->nik", Jx, dX)
            rows = slice(row, row + 2 * len(P))
            J[rows, :n_int] = Ji.reshape(-1, n_int)
            J[rows, n_int + 6 * k : n_int + 6 * k + 6] = Jp.reshape(-1, 6)
            row += 2 * len(P)
        return J


def _apply_step(model: CameraModel, poses, delta):
    n_int = model.params().size
    new_model = model.with_params(model.params() + delta[:n_int])
    new_poses = []
    for k, pose in enumerate(poses):
        d = delta[n_int + 6 * k : n_int + 6 * k + 6]
        R = Rotation.from_rotvec(d[:3]).as_matrix() @ pose.rotation
        new_poses.append(Pose(R, pose.translation + d[3:]))
    return new_model, new_poses


def refine(model_init: CameraModel, corrs: CorrespondenceSet, cfg: OptimizerConfig | None = None) -> CalibrationResult:
    """Joint Levenberg-Marquardt refinement of intrinsics and per-view poses.

    Views without an initial pose are initialized with :func:`estimate_pose`
    under ``model_init``. Points not projectable at the start are excluded
    and counted in ``diagnostics``. Trial steps that leave a model's
    parameter or projection domain are rejected like any uphill step.
    """
    cfg = cfg or OptimizerConfig()
    poses = [v.pose if v.pose is not None else estimate_pose(model_init, v.points, v.pixels) for v in corrs.views]
    masks = [model_init.project_with_mask(p.apply(v.points))[1] for p, v in zip(poses, corrs.views)]
    prob = _Problem(corrs, masks)
    excluded = sum(int(np.count_nonzero(~m)) for m in masks)
    if prob.n == 0:
        raise OutOfDomainError("no correspondence is projectable under the initial model")
    if excluded:
        logger.warning("excluding %d correspondences outside the initial model's domain", excluded)

    model = model_init
    r = prob.residuals(model, poses)
    cost = float(r @ r) / prob.n
    lam = cfg.damping
    history = [cost]
    accepted = 0
    rejected = 0
    reason = "max_iters"
    converged = False

    for _ in range(cfg.max_iters):
        if cost <= cfg.cost_floor:
            reason, converged = "cost_floor", True
            break
        J = prob.jacobian(model, poses)
        A = J.T @ J
        g = J.T @ r
        diag = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        x_norm = np.linalg.norm(np.concatenate([model.params()] + [p.translation for p in poses]))
        stepped = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_up
                continue
            try:
                trial_model, trial_poses = _apply_step(model, poses, delta)
                r_new = prob.residuals(trial_model, trial_poses)
            except CamGeoError:
                r_new = None
            new_cost = float(r_new @ r_new) / prob.n if r_new is not None else np.inf
            if new_cost < cost:
                stepped = True
                break
            rejected += 1
            lam *= cfg.damping_up
            if np.linalg.norm(delta) <= cfg.step_tol * (x_norm + cfg.step_tol):
                break
        if not stepped:
            reason, converged = "no_descent", True
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        model, poses, r, cost = trial_model, trial_poses, r_new, new_cost
        accepted += 1
        history.append(cost)
        lam = max(lam * cfg.damping_down, 1e-15)
        if np.linalg.norm(delta) <= cfg.step_tol * (x_norm + cfg.step_tol):
            reason, converged = "step_tol", True
            break
        if rel < cfg.cost_tol:
            reason, converged = "cost_tol", True
            break

    if not converged:
        logger.warning("refine hit %d iterations without meeting tolerances", cfg.max_iters)
    stats = reprojection_stats(model, poses, corrs)
    diagnostics = {
        "reason": reason,
        "rejected_steps": rejected,
        "final_damping": lam,
        "excluded_points": excluded,
        "n_points": prob.n,
        "cost_history": history,
    }
    return CalibrationResult(model, poses, cost, float(np.sqrt(cost)), accepted, converged, list(stats.per_view_rms), diagnostics)


def relative_errors(estimate: CameraModel, truth: CameraModel) -> dict:
    est, tru = estimate.params(), truth.params()
    return {n: float(abs(e - t) / abs(t)) if t != 0 else float(abs(e)) for n, e, t in zip(truth.param_names(), est, tru)}


def perturb_and_recover(model_true: CameraModel, corrs: CorrespondenceSet, factor: float, cfg: OptimizerConfig | None = None, keep_poses: bool = False) -> CalibrationResult:
    """Start every intrinsic at ``factor * truth``, refine, report relative errors.

    Poses are re-estimated from the perturbed intrinsics unless
    ``keep_poses`` is set and the views carry poses.
    """
    if not factor > 0:
        raise CamGeoError("perturbation factor must be positive")
    init = model_true.scaled(factor)
    work = corrs if keep_poses else corrs.without_poses()
    res = refine(init, work, cfg)
    res.relative_errors = relative_errors(res.model, model_true)
    res.diagnostics["factor"] = factor
    res.diagnostics["init"] = init.to_dict()
    return res


def rectify(image, src: CameraModel, dst: Pinhole, out_shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Resample ``image`` (seen by ``src``) into the ideal pinhole ``dst``.

    Returns the image and a mask; pixels outside ``src``'s domain or image
    are 0 and masked out.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = (image.shape[:2] if out_shape is None else out_shape[:2])
    X, ok = dst.unproject_with_mask(pixel_grid(H, W))
    uv, ok2 = src.project_with_mask(X)
    uv = np.where((ok & ok2)[..., None], uv, -1.0)
    out, mask = sample_bilinear(image, uv)
    return out, mask & ok & ok2


# file formats ----------------------------------------------------------------


def correspondences_to_jsonl(corrs: CorrespondenceSet) -> str:
    lines = []
    for k, view in enumerate(corrs.views):
        for P, p in zip(view.points, view.pixels):
            lines.append(json.dumps({"view": k, "P": [float(x) for x in P], "p": [float(x) for x in p]}))
    return "\n".join(lines) + "\n"


def _vector(rec, key, n, path, lineno):
    if key not in rec:
        raise FormatError(f"missing field {key!r}", path, lineno)
    v = rec[key]
    if not isinstance(v, list) or len(v) != n:
        raise FormatError(f"field {key!r} must be a list of {n} numbers", path, lineno)
    try:
        arr = np.array([float(x) for x in v])
    except (TypeError, ValueError):
        raise FormatError(f"field {key!r} must be a list of {n} numbers", path, lineno) from None
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"field {key!r} is not finite", path, lineno)
    return arr


def correspondences_from_jsonl(text: str, path=None) -> CorrespondenceSet:
    groups: dict[int, tuple[list, list]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON ({exc.msg})", path, lineno) from None
        if not isinstance(rec, dict):
            raise FormatError("record must be an object", path, lineno)
        view = rec.get("view")
        if not isinstance(view, int) or isinstance(view, bool) or view < 0:
            raise FormatError("field 'view' must be a non-negative integer", path, lineno)
        P = _vector(rec, "P", 3, path, lineno)
        p = _vector(rec, "p", 2, path, lineno)
        pts, pix = groups.setdefault(view, ([], []))
        pts.append(P)
        pix.append(p)
    if not groups:
        raise FormatError("no correspondences found", path)
    return CorrespondenceSet(tuple(View(np.array(groups[k][0]), np.array(groups[k][1])) for k in sorted(groups)))


def load_correspondences(path) -> CorrespondenceSet:
    path = Path(path)
    return correspondences_from_jsonl(path.read_text(), path)


def save_correspondences(corrs: CorrespondenceSet, path) -> None:
    Path(path).write_text(correspondences_to_jsonl(corrs))
