"""Parametric central camera models with exact projection and unprojection.

Five variants share one interface: pinhole, Brown-Conrady, UCM, EUCM and
Double Sphere. All methods are vectorized over leading axes; points are
``(..., 3)`` and pixels ``(..., 2)``.

Depth convention for :func:`unproject`: pinhole and Brown take planar
depth (the camera-frame ``z``); UCM, EUCM and DS take Euclidean range
along the viewing ray. ``model.depth_kind`` reports which one applies and
``model.depth_of`` converts a camera-frame point to that quantity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import ClassVar

import numpy as np

from .errors import CamGeoError, OutOfDomainError
from .geometry import intrinsics_matrix

_EPS = 1e-12


def _split(P):
    P = np.asarray(P, dtype=np.float64)
    return P[..., 0], P[..., 1], P[..., 2]


def _raise_if_invalid(valid, message):
    if not np.all(valid):
        n = int(np.size(valid) - np.count_nonzero(valid))
        raise OutOfDomainError(f"{message} ({n} of {np.size(valid)} samples violate it)")


def _sphere_shift_w(alpha: float) -> float:
    return alpha / (1 - alpha) if alpha <= 0.5 else (1 - alpha) / alpha


@dataclass(frozen=True)
class CameraModel:
    name: ClassVar[str] = "base"
    depth_kind: ClassVar[str] = "z"
    domain_rule: ClassVar[str] = ""

    # parameter vector plumbing -------------------------------------------
    @classmethod
    def param_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def params(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.param_names()], dtype=np.float64)

    def with_params(self, values) -> CameraModel:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        return type(self)(*[float(v) for v in values])

    def scaled(self, factor: float) -> CameraModel:
        """Every parameter multiplied by ``factor`` (perturbation experiments)."""
        return self.with_params(self.params() * factor)

    def resized(self, factor: float) -> CameraModel:
        """Same camera for an image resampled by ``factor``; only fx, fy, cx, cy change."""
        return replace(self, fx=self.fx * factor, fy=self.fy * factor, cx=self.cx * factor, cy=self.cy * factor)

    @property
    def K(self) -> np.ndarray:
        return intrinsics_matrix(self.fx, self.fy, self.cx, self.cy)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CamGeoError(f"{self.name}: focal lengths must be positive")
        if not all(np.isfinite(getattr(self, n)) for n in self.param_names()):
            raise CamGeoError(f"{self.name}: non-finite parameter")

    # subclasses implement the raw maps -----------------------------------
    def project_with_mask(self, P) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def unproject_with_mask(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Points at unit depth (in ``depth_kind`` units) plus validity."""
        raise NotImplementedError

    def depth_of(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=np.float64)
        if self.depth_kind == "z":
            return P[..., 2]
        return np.linalg.norm(P, axis=-1)

    # checked public API --------------------------------------------------
    def project(self, P) -> np.ndarray:
        uv, valid = self.project_with_mask(P)
        _raise_if_invalid(valid, f"{self.name} projection requires {self.domain_rule}")
        return uv

    def unproject(self, p, depth) -> np.ndarray:
        depth = np.asarray(depth, dtype=np.float64)
        if np.any(~(depth > 0)):
            raise OutOfDomainError("unprojection requires depth > 0")
        X, valid = self.unproject_with_mask(p)
        _raise_if_invalid(valid, f"{self.name} unprojection: pixel outside the admissible radius")
        return X * depth[..., None]

    def to_dict(self) -> dict:
        return {"model": self.name, **asdict(self)}


@dataclass(frozen=True)
class Pinhole(CameraModel):
    fx: float
    fy: float
    cx: float
    cy: float
    name: ClassVar[str] = "pinhole"
    domain_rule: ClassVar[str] = "z > 0"

    def project_with_mask(self, P):
        x, y, z = _split(P)
        valid = z > _EPS
        zs = np.where(valid, z, 1.0)
        uv = np.stack([self.fx * x / zs + self.cx, self.fy * y / zs + self.cy], axis=-1)
        return uv, valid

    def unproject_with_mask(self, p):
        p = np.asarray(p, dtype=np.float64)
        mx = (p[..., 0] - self.cx) / self.fx
        my = (p[..., 1] - self.cy) / self.fy
        X = np.stack([mx, my, np.ones_like(mx)], axis=-1)
        return X, np.isfinite(mx) & np.isfinite(my)


@dataclass(frozen=True)
class Brown(CameraModel):
    """Pinhole with radial (k1, k2, k3) and tangential (p1, p2) distortion.

    ``r^2`` is measured on undistorted normalized coordinates. Unprojection
    inverts the distortion with Newton iterations.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    name: ClassVar[str] = "brown"
    domain_rule: ClassVar[str] = "z > 0"
    newton_iters: ClassVar[int] = 20
    newton_tol: ClassVar[float] = 1e-10

    @property
    def pinhole(self) -> Pinhole:
        return Pinhole(self.fx, self.fy, self.cx, self.cy)

    def distort_normalized(self, xn):
        xn = np.asarray(xn, dtype=np.float64)
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        radial = 1 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
        xd = x * radial + 2 * self.p1 * x * y + self.p2 * (r2 + 2 * x * x)
        yd = y * radial + self.p1 * (r2 + 2 * y * y) + 2 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def _distortion_jacobian(self, x, y):
        r2 = x * x + y * y
        radial = 1 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
        g = self.k1 + 2 * self.k2 * r2 + 3 * self.k3 * r2 * r2
        a = radial + 2 * x * x * g + 2 * self.p1 * y + 6 * self.p2 * x
        b = 2 * x * y * g + 2 * self.p1 * x + 2 * self.p2 * y
        d = radial + 2 * y * y * g + 6 * self.p1 * y + 2 * self.p2 * x
        return a, b, b, d

    def undistort_normalized(self, xd):
        xd = np.asarray(xd, dtype=np.float64)
        x, y = xd[..., 0].copy(), xd[..., 1].copy()
        converged = np.zeros(x.shape, dtype=bool)
        for _ in range(self.newton_iters):
            res = self.distort_normalized(np.stack([x, y], axis=-1)) - xd
            a, b, c, d = self._distortion_jacobian(x, y)
            det = a * d - b * c
            det = np.where(np.abs(det) < _EPS, _EPS, det)
            dx = (d * res[..., 0] - b * res[..., 1]) / det
            dy = (-c * res[..., 0] + a * res[..., 1]) / det
            x -= dx
            y -= dy
            converged = np.hypot(dx, dy) < self.newton_tol
            if np.all(converged):
                break
        res = self.distort_normalized(np.stack([x, y], axis=-1)) - xd
        a, b, c, d = self._distortion_jacobian(x, y)
        ok = converged & (np.hypot(res[..., 0], res[..., 1]) < 1e-9) & (a * d - b * c > 0)
        return np.stack([x, y], axis=-1), ok

    def project_with_mask(self, P):
        x, y, z = _split(P)
        valid = z > _EPS
        zs = np.where(valid, z, 1.0)
        xd = self.distort_normalized(np.stack([x / zs, y / zs], axis=-1))
        uv = np.stack([self.fx * xd[..., 0] + self.cx, self.fy * xd[..., 1] + self.cy], axis=-1)
        return uv, valid

    def unproject_with_mask(self, p):
        p = np.asarray(p, dtype=np.float64)
        xd = np.stack([(p[..., 0] - self.cx) / self.fx, (p[..., 1] - self.cy) / self.fy], axis=-1)
        xn, ok = self.undistort_normalized(xd)
        X = np.concatenate([xn, np.ones(xn.shape[:-1] + (1,))], axis=-1)
        return X, ok


@dataclass(frozen=True)
class UCM(CameraModel):
    fx: float
    fy: float
    cx: float
    cy: float
    alpha: float
    name: ClassVar[str] = "ucm"
    depth_kind: ClassVar[str] = "range"
    domain_rule: ClassVar[str] = "z > -w*d with w = alpha/(1-alpha) or (1-alpha)/alpha"

    def __post_init__(self):
        super().__post_init__()
        if not 0 <= self.alpha < 1:
            raise CamGeoError(f"ucm: alpha must lie in [0, 1), got {self.alpha}")

    def project_with_mask(self, P):
        x, y, z = _split(P)
        d = np.sqrt(x * x + y * y + z * z)
        denom = self.alpha * d + (1 - self.alpha) * z
        w = _sphere_shift_w(self.alpha)
        valid = (z > -w * d) & (denom > _EPS * np.maximum(d, 1.0))
        ds = np.where(valid, denom, 1.0)
        uv = np.stack([self.fx * x / ds + self.cx, self.fy * y / ds + self.cy], axis=-1)
        return uv, valid

    def unproject_with_mask(self, p):
        p = np.asarray(p, dtype=np.float64)
        a = self.alpha
        mx = (p[..., 0] - self.cx) / self.fx * (1 - a)
        my = (p[..., 1] - self.cy) / self.fy * (1 - a)
        r2 = mx * mx + my * my
        xi = a / (1 - a)
        if a > 0.5:
            valid = r2 <= (1 - a) ** 2 / (2 * a - 1)
        else:
            valid = np.ones(r2.shape, dtype=bool)
        disc = np.where(valid, 1 + (1 - xi * xi) * r2, 1.0)
        eta = (xi + np.sqrt(disc)) / (1 + r2)
        X = np.stack([eta * mx, eta * my, eta - xi], axis=-1)
        return X, valid


@dataclass(frozen=True)
class EUCM(CameraModel):
    fx: float
    fy: float
    cx: float
    cy: float
    alpha: float
    beta: float
    name: ClassVar[str] = "eucm"
    depth_kind: ClassVar[str] = "range"
    domain_rule: ClassVar[str] = "z > -w*d with d = sqrt(beta*(x^2+y^2) + z^2)"

    def __post_init__(self):
        super().__post_init__()
        if not 0 <= self.alpha < 1:
            raise CamGeoError(f"eucm: alpha must lie in [0, 1), got {self.alpha}")
        if not self.beta > 0:
            raise CamGeoError(f"eucm: beta must be positive, got {self.beta}")

    def project_with_mask(self, P):
        x, y, z = _split(P)
        d = np.sqrt(self.beta * (x * x + y * y) + z * z)
        denom = self.alpha * d + (1 - self.alpha) * z
        w = _sphere_shift_w(self.alpha)
        valid = (z > -w * d) & (denom > _EPS * np.maximum(d, 1.0))
        ds = np.where(valid, denom, 1.0)
        uv = np.stack([self.fx * x / ds + self.cx, self.fy * y / ds + self.cy], axis=-1)
        return uv, valid

    def unproject_with_mask(self, p):
        p = np.asarray(p, dtype=np.float64)
        a, b = self.alpha, self.beta
        mx = (p[..., 0] - self.cx) / self.fx
        my = (p[..., 1] - self.cy) / self.fy
        r2 = mx * mx + my * my
        if a > 0.5:
            valid = r2 <= 1 / (b * (2 * a - 1))
        else:
            valid = np.ones(r2.shape, dtype=bool)
        disc = np.where(valid, 1 - (2 * a - 1) * b * r2, 1.0)
        mz = (1 - b * a * a * r2) / (a * np.sqrt(disc) + (1 - a))
        X = np.stack([mx, my, mz], axis=-1)
        X = X / np.linalg.norm(X, axis=-1, keepdims=True)
        return X, valid


@dataclass(frozen=True)
class DoubleSphere(CameraModel):
    fx: float
    fy: float
    cx: float
    cy: float
    alpha: float
    xi: float
    name: ClassVar[str] = "ds"
    depth_kind: ClassVar[str] = "range"
    domain_rule: ClassVar[str] = "z > -w2*d1"

    def __post_init__(self):
        super().__post_init__()
        if not 0 <= self.alpha < 1:
            raise CamGeoError(f"ds: alpha must lie in [0, 1), got {self.alpha}")

    def project_with_mask(self, P):
        x, y, z = _split(P)
        a, xi = self.alpha, self.xi
        d1 = np.sqrt(x * x + y * y + z * z)
        zs = xi * d1 + z
        d2 = np.sqrt(x * x + y * y + zs * zs)
        denom = a * d2 + (1 - a) * zs
        w1 = _sphere_shift_w(a)
        w2 = (w1 + xi) / np.sqrt(2 * w1 * xi + xi * xi + 1)
        valid = (z > -w2 * d1) & (denom > _EPS * np.maximum(d1, 1.0))
        ds = np.where(valid, denom, 1.0)
        uv = np.stack([self.fx * x / ds + self.cx, self.fy * y / ds + self.cy], axis=-1)
        return uv, valid

    def unproject_with_mask(self, p):
        p = np.asarray(p, dtype=np.float64)
        a, xi = self.alpha, self.xi
        mx = (p[..., 0] - self.cx) / self.fx
        my = (p[..., 1] - self.cy) / self.fy
        r2 = mx * mx + my * my
        if a > 0.5:
            valid = r2 <= 1 / (2 * a - 1)
        else:
            valid = np.ones(r2.shape, dtype=bool)
        disc = np.where(valid, 1 - (2 * a - 1) * r2, 1.0)
        mz = (1 - a * a * r2) / (a * np.sqrt(disc) + 1 - a)
        disc2 = mz * mz + (1 - xi * xi) * r2
        valid = valid & (disc2 >= 0)
        scale = (mz * xi + np.sqrt(np.where(valid, disc2, 0.0))) / (mz * mz + r2)
        X = np.stack([scale * mx, scale * my, scale * mz - xi], axis=-1)
        return X, valid


MODELS: dict[str, type[CameraModel]] = {
    cls.name: cls for cls in (Pinhole, Brown, UCM, EUCM, DoubleSphere)
}


def project(model: CameraModel, P) -> np.ndarray:
    return model.project(P)


def unproject(model: CameraModel, p, depth) -> np.ndarray:
    return model.unproject(p, depth)


def distort(model: Brown, p_undistorted) -> np.ndarray:
    """Map undistorted pixel(s) to distorted pixel(s) through ``model``."""
    p = np.asarray(p_undistorted, dtype=np.float64)
    xn = np.stack([(p[..., 0] - model.cx) / model.fx, (p[..., 1] - model.cy) / model.fy], axis=-1)
    xd = model.distort_normalized(xn)
    return np.stack([model.fx * xd[..., 0] + model.cx, model.fy * xd[..., 1] + model.cy], axis=-1)


def undistort(model: Brown, p_distorted) -> np.ndarray:
    p = np.asarray(p_distorted, dtype=np.float64)
    xd = np.stack([(p[..., 0] - model.cx) / model.fx, (p[..., 1] - model.cy) / model.fy], axis=-1)
    xn, ok = model.undistort_normalized(xd)
    _raise_if_invalid(ok, "brown undistortion did not converge")
    return np.stack([model.fx * xn[..., 0] + model.cx, model.fy * xn[..., 1] + model.cy], axis=-1)


def param_step(theta) -> np.ndarray:
    return np.maximum(1e-6, 1e-6 * np.abs(theta))


def param_jacobian(model: CameraModel, P, step=None) -> np.ndarray:
    """d(pixel)/d(params) by central differences, shape ``(..., 2, n_params)``.

    Columns follow ``model.param_names()``. ``step`` overrides the default
    per-parameter step ``max(1e-6, 1e-6 |theta|)``.
    """
    theta = model.params()
    h = param_step(theta) if step is None else np.broadcast_to(np.asarray(step, float), theta.shape)
    P = np.asarray(P, dtype=np.float64)
    cols = []
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h[k]
        try:
            plus = model.with_params(theta + e).project(P)
            minus = model.with_params(theta - e).project(P)
        except CamGeoError as exc:
            raise OutOfDomainError(
                f"jacobian step on {model.param_names()[k]} leaves the domain: {exc}"
            ) from exc
        cols.append((plus - minus) / (2 * h[k]))
    return np.stack(cols, axis=-1)


def camera_from_dict(d: dict) -> CameraModel:
    d = dict(d)
    try:
        cls = MODELS[d.pop("model")]
    except KeyError as exc:
        raise CamGeoError(f"unknown or missing camera model tag: {exc}") from None
    names = set(cls.param_names())
    unknown = set(d) - names
    if unknown:
        raise CamGeoError(f"unexpected {cls.name} parameters: {sorted(unknown)}")
    return cls(**{k: float(v) for k, v in d.items()})


def camera_to_json(model: CameraModel) -> str:
    return json.dumps(model.to_dict(), indent=2) + "\n"


def camera_from_json(text: str) -> CameraModel:
    return camera_from_dict(json.loads(text))


def change_model(model: CameraModel, cls: type[CameraModel], **extra) -> CameraModel:
    """Build a ``cls`` camera sharing the focal lengths and principal point."""
    base = dict(fx=model.fx, fy=model.fy, cx=model.cx, cy=model.cy)
    base.update(extra)
    return cls(**base)


__all__ = [
    "CameraModel", "Pinhole", "Brown", "UCM", "EUCM", "DoubleSphere", "MODELS",
    "project", "unproject", "distort", "undistort", "param_jacobian",
    "camera_from_dict", "camera_to_json", "camera_from_json", "change_model", "replace",
]
