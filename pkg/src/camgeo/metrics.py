"""Depth evaluation metrics with optional median scaling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import CamGeoError, ShapeError
from .multicam import shared_median_scale
from .photometric import DepthMap

PRED_FLOOR = 1e-3
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "mae_log10", "rmse_log10", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    mae_log10: float
    rmse_log10: float
    delta1: float  # fraction with max(p/g, g/p) < 1.25
    delta2: float  # < 1.25^2
    delta3: float  # < 1.25^3
    valid_count: int
    scaling_mode: str
    scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        head = " ".join(f"{n:>10}" for n in METRIC_NAMES)
        vals = " ".join(f"{getattr(self, n):10.4f}" for n in METRIC_NAMES)
        return head + "\n" + vals + "\n"

    @classmethod
    def mean(cls, reports, mode: str) -> MetricsReport:
        reports = list(reports)
        vals = {n: float(np.mean([getattr(r, n) for r in reports])) for n in METRIC_NAMES}
        return cls(**vals, valid_count=sum(r.valid_count for r in reports), scaling_mode=mode, scale=float("nan"))


def _arrays(pred, gt):
    p = pred.depth if isinstance(pred, DepthMap) else np.asarray(pred, dtype=np.float64)
    g = gt.depth if isinstance(gt, DepthMap) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    valid = np.isfinite(g) & (g > 0)  # 0 codes a missing measurement
    if isinstance(gt, DepthMap):
        valid &= gt.valid
    return p, g, valid


def evaluate(pred, gt, mode: str = "none", gamma: float | None = None, d_max: float | None = None) -> MetricsReport:
    """Standard depth metrics over valid ground-truth pixels.

    ``mode``: ``none``; ``median`` (per-map ``med(gt)/med(pred)``); or
    ``shared`` with an externally computed ``gamma``. Ground truth beyond
    ``d_max`` is ignored and scaled predictions are clamped to
    ``[1e-3, d_max]``.
    """
    p, g, valid = _arrays(pred, gt)
    if d_max is not None:
        valid &= g <= d_max
    valid &= np.isfinite(p)
    if not np.any(valid):
        raise CamGeoError("no valid pixels to evaluate")
    p, g = p[valid], g[valid]
    if mode == "none":
        scale = 1.0
    elif mode == "median":
        scale = float(np.median(g) / np.median(p))
    elif mode == "shared":
        if gamma is None:
            raise CamGeoError("shared scaling needs gamma")
        scale = float(gamma)
    else:
        raise CamGeoError(f"unknown scaling mode {mode!r}")
    p = np.clip(p * scale, PRED_FLOOR, d_max if d_max is not None else np.inf)

    diff = p - g
    ratio = np.maximum(p / g, g / p)
    lg = np.log(p) - np.log(g)
    l10 = np.log10(p) - np.log10(g)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean(lg**2))),
        mae_log10=float(np.mean(np.abs(l10))),
        rmse_log10=float(np.sqrt(np.mean(l10**2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        valid_count=int(valid.sum()),
        scaling_mode=mode,
        scale=scale,
    )


def evaluate_rig(preds, gts, mode: str = "per-frame", d_max: float | None = None) -> tuple[list[MetricsReport], MetricsReport]:
    """Per-camera reports and their average.

    ``per-frame`` median-scales each camera on its own; ``shared`` applies
    one pooled-median scale to every camera; ``none`` leaves predictions.
    """
    if len(preds) != len(gts) or not preds:
        raise ShapeError("need matching, non-empty prediction and ground-truth lists")
    if mode == "per-frame":
        reports = [evaluate(p, g, "median", d_max=d_max) for p, g in zip(preds, gts)]
    elif mode == "shared":
        gamma = shared_median_scale(preds, gts)
        reports = [evaluate(p, g, "shared", gamma=gamma, d_max=d_max) for p, g in zip(preds, gts)]
    elif mode == "none":
        reports = [evaluate(p, g, "none", d_max=d_max) for p, g in zip(preds, gts)]
    else:
        raise CamGeoError(f"unknown rig scaling mode {mode!r}")
    return reports, MetricsReport.mean(reports, mode)
