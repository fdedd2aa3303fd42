"""Rigid transforms, viewing rays and two-view epipolar primitives.

Pose convention: a :class:`Pose` maps points expressed in a reference
(canonical / world) frame into the camera frame, ``X_cam = R @ X_ref + t``.
Every formula in the package is written against this convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateError, ShapeError

EULER_SEQ = "XYZ"  # intrinsic x-y-z


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ShapeError(f"expected a 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> Pose:
        return cls(Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix(), translation)

    @classmethod
    def from_euler(cls, angles, translation) -> Pose:
        return cls(Rotation.from_euler(EULER_SEQ, np.asarray(angles, float)).as_matrix(), translation)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Camera center in the reference frame."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=np.float64)
        return P @ self.rotation.T + self.translation

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def euler(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_euler(EULER_SEQ)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
            and np.all(np.isfinite(self.translation))
        )

    def to_text(self) -> str:
        return "\n".join(" ".join(repr(float(x)) for x in row) for row in self.matrix) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Pose:
        rows = [line.split() for line in text.strip().splitlines() if line.strip()]
        if len(rows) != 4 or any(len(r) != 4 for r in rows):
            raise ShapeError("pose text must hold 4 rows of 4 numbers")
        T = np.array([[float(x) for x in r] for r in rows])
        if not np.allclose(T[3], [0, 0, 0, 1]):
            raise ShapeError("last pose row must be 0 0 0 1")
        return cls.from_matrix(T)

    def __repr__(self):
        return f"Pose(rotvec={Rotation.from_matrix(self.rotation).as_rotvec()}, t={self.translation})"


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    return p.inverse()


def skew(v) -> np.ndarray:
    """Cross-product matrix ``[v]_x``; batched over leading axes."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ShapeError(f"skew expects 3-vectors, got shape {v.shape}")
    S = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    S[..., 0, 1], S[..., 0, 2] = -z, y
    S[..., 1, 0], S[..., 1, 2] = z, -x
    S[..., 2, 0], S[..., 2, 1] = -y, x
    return S


def homogenize(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def intrinsics_matrix(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


@dataclass(frozen=True, eq=False)
class ViewingRay:
    origin: np.ndarray
    direction: np.ndarray

    def at(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        return self.origin + d[..., None] * self.direction


def _checked_inverse(K) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (3, 3):
        raise ShapeError(f"intrinsics must be 3x3, got {K.shape}")
    if abs(np.linalg.det(K)) < 1e-12 or not np.all(np.isfinite(K)):
        raise DegenerateError("intrinsics matrix is singular")
    return np.linalg.inv(K)


def ray_from_pixel(p, intrinsics, pose: Pose) -> ViewingRay:
    """Viewing ray of pixel(s) ``p`` in the reference frame.

    The direction is ``(K R)^-1 [u, v, 1]`` normalized. The origin is the
    camera center ``-R^T t``, the only origin for which the ray passes
    through the unprojected points under the world-to-camera convention.
    Works on a single pixel ``(2,)`` or a batch ``(..., 2)``.
    """
    Kinv = _checked_inverse(intrinsics)
    ph = homogenize(p)
    d = ph @ (pose.rotation.T @ Kinv).T
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    origin = np.broadcast_to(pose.center, d.shape).copy()
    return ViewingRay(origin, d)


def fundamental_from_calibration(K, pose: Pose) -> np.ndarray:
    """Fundamental matrix between view 0 and view 1, ``p1^T F p0 = 0``.

    ``pose`` maps view-0 coordinates into view 1 (``X1 = R X0 + t``). The
    product ``K^-T R [c]_x K^-1`` is evaluated with ``c = -R^T t``, the
    baseline expressed in view-0 coordinates; with ``[t]_x`` taken in
    view-1 coordinates instead the constraint does not hold for rotated
    pairs. Result is scaled to unit Frobenius norm.
    """
    t = pose.translation
    if np.linalg.norm(t) < 1e-12:
        raise DegenerateError("zero translation: fundamental matrix undefined")
    Kinv = _checked_inverse(K)
    c = -pose.rotation.T @ t
    F = Kinv.T @ pose.rotation @ skew(c) @ Kinv
    return F / np.linalg.norm(F)


def _hartley_normalization(x: np.ndarray) -> np.ndarray:
    centroid = x.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((x - centroid) ** 2, axis=1)))
    if rms < 1e-12:
        raise DegenerateError("all points coincide")
    s = np.sqrt(2) / rms
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])


def enforce_rank2(F) -> np.ndarray:
    U, S, Vt = np.linalg.svd(F)
    S[2] = 0.0
    return U @ np.diag(S) @ Vt


def eight_point(p0, p1) -> np.ndarray:
    """Normalized 8-point estimate of F from pixel correspondences (N, 2)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if p0.shape != p1.shape or p0.ndim != 2 or p0.shape[1] != 2:
        raise ShapeError("correspondences must be two (N, 2) arrays")
    if len(p0) < 8:
        raise DegenerateError(f"need at least 8 correspondences, got {len(p0)}")
    T0 = _hartley_normalization(p0)
    T1 = _hartley_normalization(p1)
    x0 = homogenize(p0) @ T0.T
    x1 = homogenize(p1) @ T1.T
    # rows encode x1^T F x0 = 0 with F flattened row-major
    A = (x1[:, :, None] * x0[:, None, :]).reshape(len(p0), 9)
    _, S, Vt = np.linalg.svd(A)
    if len(S) < 9 or S[7] / S[0] < 1e-10:
        raise DegenerateError("degenerate configuration: epipolar system has a multi-dimensional null space")
    F = enforce_rank2(Vt[-1].reshape(3, 3))
    F = T1.T @ F @ T0
    return F / np.linalg.norm(F)


def epipolar_residuals(F, p0, p1) -> np.ndarray:
    return np.einsum("ni,ij,nj->n", homogenize(p1), F, homogenize(p0))


def sampson_error(F, p0, p1):
    """Sampson error of correspondence(s); scalar for single pixels."""
    F = np.asarray(F, dtype=np.float64)
    x0 = homogenize(p0)
    x1 = homogenize(p1)
    Fx0 = x0 @ F.T
    Ftx1 = x1 @ F
    num = np.sum(x1 * Fx0, axis=-1) ** 2
    den = Fx0[..., 0] ** 2 + Fx0[..., 1] ** 2 + Ftx1[..., 0] ** 2 + Ftx1[..., 1] ** 2
    if np.any(den <= 0):
        raise DegenerateError("Sampson denominator vanishes (epipole at the pixel)")
    out = num / den
    return float(out) if np.ndim(out) == 0 else out
