"""Non-parametric central camera: one unit viewing direction per pixel.

Pixel ``(u, v)`` addresses column ``u`` and row ``v`` of the direction
grid; integer coordinates sit on pixel centers. Unprojection scales the
(bilinearly interpolated, renormalized) direction by range.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .cameras import Pinhole
from .errors import CamGeoError, OutOfDomainError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"RAYSURF\x00"
DEFAULT_PATCH = 41


def _normalize(v, axis=-1):
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


@dataclass(frozen=True, eq=False)
class RaySurface:
    directions: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        Q = np.array(self.directions, dtype=np.float64)
        if Q.ndim != 3 or Q.shape[2] != 3:
            raise ShapeError(f"directions must be (H, W, 3), got {Q.shape}")
        norms = np.linalg.norm(Q, axis=-1)
        if np.any(np.abs(norms - 1) > 1e-6):
            raise CamGeoError("ray surface directions must be unit vectors")
        o = np.array(self.origin, dtype=np.float64).reshape(3)
        Q.setflags(write=False)
        o.setflags(write=False)
        object.__setattr__(self, "directions", Q)
        object.__setattr__(self, "origin", o)

    @property
    def height(self) -> int:
        return self.directions.shape[0]

    @property
    def width(self) -> int:
        return self.directions.shape[1]

    def direction_at(self, p) -> np.ndarray:
        """Bilinearly interpolated, renormalized direction at pixel(s) ``p``."""
        p = np.asarray(p, dtype=np.float64)
        u, v = p[..., 0], p[..., 1]
        if np.any((u < 0) | (u > self.width - 1) | (v < 0) | (v > self.height - 1)) or not np.all(np.isfinite(p)):
            raise OutOfDomainError("pixel outside the ray surface grid")
        idx, w = _bilinear_corners(u, v, self.height, self.width)
        flat = self.directions.reshape(-1, 3)
        q = np.einsum("...k,...kc->...c", w, flat[idx])
        return _normalize(q)

    def downsample(self) -> RaySurface:
        """Half-resolution surface (2x2 block mean, renormalized)."""
        H2, W2 = self.height // 2, self.width // 2
        Q = self.directions[: 2 * H2, : 2 * W2].reshape(H2, 2, W2, 2, 3).sum(axis=(1, 3))
        return RaySurface(_normalize(Q), self.origin)

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<II", self.height, self.width)
        return head + self.directions.astype("<f8").tobytes() + self.origin.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> RaySurface:
        if data[:8] != MAGIC:
            raise CamGeoError("not a ray surface file (bad magic)")
        H, W = struct.unpack("<II", data[8:16])
        n = H * W * 3
        expected = 16 + 8 * (n + 3)
        if len(data) != expected:
            raise CamGeoError(f"ray surface file has {len(data)} bytes, expected {expected}")
        Q = np.frombuffer(data, dtype="<f8", count=n, offset=16).reshape(H, W, 3)
        o = np.frombuffer(data, dtype="<f8", count=3, offset=16 + 8 * n)
        return cls(Q.astype(np.float64), o.astype(np.float64))


def _bilinear_corners(u, v, H, W):
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = u - u0
    fv = v - v0
    idx = np.stack([v0 * W + u0, v0 * W + u1, v1 * W + u0, v1 * W + u1], axis=-1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1)
    return idx, w


def pixel_grid(H: int, W: int) -> np.ndarray:
    """(H, W, 2) array of (u, v) pixel-center coordinates."""
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([u, v], axis=-1)


def template_from_pinhole(intrinsics: Pinhole, H: int, W: int) -> RaySurface:
    X, _ = intrinsics.unproject_with_mask(pixel_grid(H, W))
    return RaySurface(_normalize(X), np.zeros(3))


def default_template(H: int, W: int) -> RaySurface:
    """Pinhole template with ``fx = cx = W/2`` and ``fy = cy = H/2``."""
    return template_from_pinhole(Pinhole(W / 2, H / 2, W / 2, H / 2), H, W)


def compose_residual(template: RaySurface, residual, lambda_r: float) -> RaySurface:
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != template.directions.shape:
        raise ShapeError(f"residual shape {residual.shape} != template shape {template.directions.shape}")
    if lambda_r == 0:
        return template
    return RaySurface(_normalize(template.directions + lambda_r * residual), template.origin)


def unproject_rs(surface: RaySurface, p, depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise OutOfDomainError("unprojection requires depth > 0")
    return surface.origin + depth[..., None] * surface.direction_at(p)


def _unit_targets(surface: RaySurface, P) -> np.ndarray:
    r = np.asarray(P, dtype=np.float64) - surface.origin
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise OutOfDomainError("point coincides with the ray surface origin")
    return r / n


def project_argmax(surface: RaySurface, P, chunk: int = 2048) -> np.ndarray:
    """Exhaustive search for the pixel whose ray best matches each point.

    Ties resolve to the smallest row-major index. Points behind every ray
    still return the best (least negative) match.
    """
    r = _unit_targets(surface, P)
    flat = surface.directions.reshape(-1, 3)
    rr = r.reshape(-1, 3)
    best = np.empty(len(rr), dtype=np.int64)
    for s in range(0, len(rr), chunk):
        best[s : s + chunk] = np.argmax(rr[s : s + chunk] @ flat.T, axis=1)
    uv = np.stack([best % surface.width, best // surface.width], axis=-1).astype(np.float64)
    return uv.reshape(r.shape[:-1] + (2,))


@dataclass(frozen=True)
class SoftmaxConfig:
    tau: float = 1e-3
    patch_h: int = DEFAULT_PATCH
    patch_w: int = DEFAULT_PATCH
    half_resolution: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise CamGeoError("tau must be positive")
        if self.patch_h % 2 == 0 or self.patch_w % 2 == 0 or self.patch_h < 1 or self.patch_w < 1:
            raise CamGeoError("patch dimensions must be positive and odd")


def _window(anchor, H, W, ph, pw):
    a = np.rint(np.asarray(anchor, dtype=np.float64)).astype(np.int64)
    dv, du = np.mgrid[-(ph // 2) : ph // 2 + 1, -(pw // 2) : pw // 2 + 1]
    rows = a[:, 1, None, None] + dv
    cols = a[:, 0, None, None] + du
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    return rows, cols, inside


def window_argmax(surface: RaySurface, P, anchor, patch_h=DEFAULT_PATCH, patch_w=DEFAULT_PATCH) -> np.ndarray:
    """:func:`project_argmax` restricted to the patch around ``anchor``."""
    r = _unit_targets(surface, P).reshape(-1, 3)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1, 2)
    rows, cols, inside = _window(anchor, surface.height, surface.width, patch_h, patch_w)
    if not np.all(inside.any(axis=(1, 2))):
        raise OutOfDomainError("search window lies entirely outside the grid")
    Q = surface.directions[np.clip(rows, 0, surface.height - 1), np.clip(cols, 0, surface.width - 1)]
    M = np.where(inside, np.einsum("nhwc,nc->nhw", Q, r), -np.inf).reshape(len(r), -1)
    k = np.argmax(M, axis=1)
    n = np.arange(len(r))
    return np.stack([cols.reshape(len(r), -1)[n, k], rows.reshape(len(r), -1)[n, k]], axis=-1).astype(float)


def project_softmax(surface: RaySurface, P, cfg: SoftmaxConfig, anchor, chunk: int = 512) -> np.ndarray:
    """Differentiable projection: softmax-weighted pixel coordinates.

    Similarities to the rays inside a ``patch_h x patch_w`` window centered
    on ``anchor`` are turned into weights with temperature ``tau``; the
    result is the weighted mean pixel coordinate. Windows clipped at the
    border keep only their in-grid support.
    """
    P = np.asarray(P, dtype=np.float64)
    single = P.ndim == 1
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1, 2)
    if cfg.half_resolution:
        half = surface.downsample()
        sub = project_softmax(half, P, SoftmaxConfig(cfg.tau, cfg.patch_h, cfg.patch_w), (anchor - 0.5) / 2, chunk)
        out = 2 * sub + 0.5
        return out[0] if single else out
    if cfg.patch_h > surface.height or cfg.patch_w > surface.width:
        raise CamGeoError("patch larger than the ray surface")
    r = _unit_targets(surface, P).reshape(-1, 3)
    if len(anchor) == 1 and len(r) > 1:
        anchor = np.repeat(anchor, len(r), axis=0)
    out = np.empty((len(r), 2))
    for s in range(0, len(r), chunk):
        rows, cols, inside = _window(anchor[s : s + chunk], surface.height, surface.width, cfg.patch_h, cfg.patch_w)
        if not np.all(inside.any(axis=(1, 2))):
            raise OutOfDomainError("search window lies entirely outside the grid")
        Q = surface.directions[np.clip(rows, 0, surface.height - 1), np.clip(cols, 0, surface.width - 1)]
        logits = np.einsum("nhwc,nc->nhw", Q, r[s : s + chunk]) / cfg.tau
        logits = np.where(inside, logits, -np.inf)
        logits -= logits.max(axis=(1, 2), keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=(1, 2), keepdims=True)
        out[s : s + chunk, 0] = np.sum(w * cols, axis=(1, 2))
        out[s : s + chunk, 1] = np.sum(w * rows, axis=(1, 2))
    return out[0] if single else out.reshape(P.shape[:-1] + (2,))


@dataclass(frozen=True)
class TauSchedule:
    """Temperature annealing; exponential ``tau0 * gamma**k`` by default."""

    tau0: float = 1.0
    gamma: float = 0.99
    tau_min: float = 1e-4
    kind: str = "exponential"
    steps: int = 1000  # linear schedule reaches tau_min here


def anneal_tau(schedule: TauSchedule, step: int) -> float:
    if step < 0:
        raise CamGeoError("step must be non-negative")
    if schedule.kind == "exponential":
        tau = schedule.tau0 * schedule.gamma**step
    elif schedule.kind == "linear":
        frac = min(step / max(schedule.steps, 1), 1.0)
        tau = schedule.tau0 + frac * (schedule.tau_min - schedule.tau0)
    else:
        raise CamGeoError(f"unknown schedule kind {schedule.kind!r}")
    return float(max(tau, schedule.tau_min))


@dataclass(frozen=True)
class ResidualSchedule:
    lambda_r: float = 1.0
    start: int = 0
    end: int = 500

    def __post_init__(self):
        if not 0 <= self.lambda_r <= 1:
            raise CamGeoError("lambda_r must lie in [0, 1]")
        if self.end < self.start:
            raise CamGeoError("ramp end precedes ramp start")

    def value(self, step: int) -> float:
        if self.end == self.start:
            ramp = 1.0 if step >= self.end else 0.0
        else:
            ramp = min(max((step - self.start) / (self.end - self.start), 0.0), 1.0)
        return self.lambda_r * ramp


@dataclass
class RayFit:
    surface: RaySurface
    residual: np.ndarray
    mean_angular_error_deg: float
    iterations: int
    converged: bool
    history: list[float]


def angular_errors_deg(surface: RaySurface, pixels, points) -> np.ndarray:
    q = surface.direction_at(pixels)
    r = _unit_targets(surface, points)
    return np.degrees(np.arccos(np.clip(np.sum(q * r, axis=-1), -1.0, 1.0)))


def fit_ray_surface(
    pixels,
    points,
    H: int,
    W: int,
    template: RaySurface | None = None,
    schedule: ResidualSchedule | None = None,
    iters: int = 3000,
    lr: float = 0.02,
    lr_final: float = 1e-4,
    tol_deg: float = 1e-3,
    accept_deg: float = 0.1,
) -> RayFit:
    """Fit a residual ray surface to pixel/point correspondences.

    Minimizes the mean ``1 - cos`` between the interpolated ray at each
    pixel and the direction to its point with Adam; ``lambda_r`` ramps per
    ``schedule`` (default: over the first half of the iterations). Returns
    the best iterate seen. Iteration stops early once the mean angular
    error drops below ``tol_deg``; ``converged`` reports whether the best
    error is under ``accept_deg``.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pixels) != len(points) or len(pixels) == 0:
        raise ShapeError("need matching, non-empty pixel and point arrays")
    template = default_template(H, W) if template is None else template
    if template.directions.shape[:2] != (H, W):
        raise ShapeError("template resolution does not match H, W")
    schedule = schedule or ResidualSchedule(1.0, 0, iters // 2)
    Q0 = template.directions.reshape(-1, 3)
    target = _unit_targets(template, points)
    if np.any((pixels[:, 0] < 0) | (pixels[:, 0] > W - 1) | (pixels[:, 1] < 0) | (pixels[:, 1] > H - 1)):
        raise OutOfDomainError("correspondence pixel outside the grid")
    idx, wts = _bilinear_corners(pixels[:, 0], pixels[:, 1], H, W)
    n = len(pixels)

    R = np.zeros_like(Q0)
    m = np.zeros_like(R)
    s2 = np.zeros_like(R)
    b1, b2 = 0.9, 0.999
    best = (np.inf, R.copy(), 0)
    history = []

    def evaluate(Rcur, lam):
        raw = Q0 + lam * Rcur
        rn = np.linalg.norm(raw, axis=1, keepdims=True)
        S = raw / rn
        q = np.einsum("nk,nkc->nc", wts, S[idx])
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        nq = q / qn
        cos = np.sum(nq * target, axis=1)
        return S, rn, q, qn, nq, cos

    for k in range(iters + 1):
        lam = schedule.value(k)
        S, rn, q, qn, nq, cos = evaluate(R, lam)
        err = float(np.degrees(np.mean(np.arccos(np.clip(cos, -1, 1)))))
        history.append(err)
        # a zero residual is the template itself whatever lambda is
        full = lam == schedule.lambda_r or k == 0
        if full and err < best[0]:
            best = (err, R.copy(), k)
        if k == iters or (full and err < tol_deg):
            break
        if lam == 0:
            continue
        # d(mean(1 - cos))/dR, chained through both normalizations
        g_n = -target / n
        g_q = (g_n - np.sum(g_n * nq, axis=1, keepdims=True) * nq) / qn
        g_S = np.zeros_like(S)
        contrib = wts[:, :, None] * g_q[:, None, :]
        for c in range(3):
            g_S[:, c] = np.bincount(idx.ravel(), weights=contrib[:, :, c].ravel(), minlength=len(S))
        g_R = lam * (g_S - np.sum(g_S * S, axis=1, keepdims=True) * S) / rn
        frac = k / max(iters, 1)
        step = lr_final + 0.5 * (lr - lr_final) * (1 + np.cos(np.pi * frac))
        m = b1 * m + (1 - b1) * g_R
        s2 = b2 * s2 + (1 - b2) * g_R**2
        mh = m / (1 - b1 ** (k + 1))
        vh = s2 / (1 - b2 ** (k + 1))
        R = R - step * mh / (np.sqrt(vh) + 1e-12)

    err, Rbest, kbest = best
    if not np.isfinite(err):
        Rbest, err = R, history[-1]
    surface = compose_residual(template, Rbest.reshape(H, W, 3), schedule.lambda_r)
    converged = err < accept_deg
    if not converged:
        logger.warning("ray surface fit stopped at %.4f deg mean angular error (target %.4f)", err, accept_deg)
    return RayFit(surface, Rbest.reshape(H, W, 3), err, kbest, converged, history)


def fit_pinhole_to_rays(pixels, points, init: Pinhole) -> tuple[Pinhole, float]:
    """Best pinhole (fx, fy, cx, cy) in mean angular error; returns (model, deg)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    r = _normalize(np.asarray(points, dtype=np.float64).reshape(-1, 3))

    def residual(theta):
        fx, fy, cx, cy = theta
        d = np.stack([(pixels[:, 0] - cx) / fx, (pixels[:, 1] - cy) / fy, np.ones(len(pixels))], axis=-1)
        d = _normalize(d)
        return np.linalg.norm(d - r, axis=1)

    sol = least_squares(residual, init.params(), x_scale="jac")
    model = Pinhole(*(float(x) for x in sol.x))
    X, _ = model.unproject_with_mask(pixels)
    ang = np.degrees(np.arccos(np.clip(np.sum(_normalize(X) * r, axis=1), -1, 1)))
    return model, float(ang.mean())
