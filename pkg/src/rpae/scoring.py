"""Track Health Index: priority-weighted region errors, severity and the anomaly flag."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box


@dataclass(frozen=True)
class CategoryConfig:
    name: str
    priority: float

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ValueError(f"category name must be an identifier: {self.name!r}")
        if not (self.priority >= 0 and math.isfinite(self.priority)):
            raise ValueError(f"priority must be a finite non-negative number: {self.priority}")


def check_categories(categories) -> None:
    if not categories:
        raise ValueError("at least one category is required")
    if not any(c.priority > 0 for c in categories):
        raise ValueError("at least one category needs a positive priority")
    names = [c.name for c in categories]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate category names: {names}")


@dataclass
class RegionScore:
    box: Box
    category_id: int
    error: float
    weight: float

    def __post_init__(self):
        if self.error < 0 or self.weight < 0:
            raise ValueError("region error and weight must be non-negative")

    @property
    def weighted_error(self) -> float:
        return self.weight * self.error


@dataclass
class THIReport:
    thi: float
    severity: float
    flagged: bool
    threshold: float
    fallback_used: bool = False
    region_scores: list[RegionScore] = field(default_factory=list)

    def to_dict(self, category_names=None) -> dict:
        def cat(i):
            return category_names[i] if category_names is not None else i

        return {
            "thi": self.thi,
            "severity": self.severity,
            "flagged": self.flagged,
            "threshold": self.threshold,
            "fallback_used": self.fallback_used,
            "regions": [
                {"box": r.box.to_dict(), "category": cat(r.category_id),
                 "error": r.error, "weight": r.weight}
                for r in self.region_scores
            ],
        }


def _check_inside(box: Box, height: int, width: int):
    if box.x_min < 0 or box.y_min < 0 or box.x_max > width or box.y_max > height:
        raise ValueError(f"box {box.as_tuple()} is not inside the {width}x{height} image")


def _axis_samples(lo: float, hi: float, n: int, size: int) -> np.ndarray:
    # sample at the n cell centres of [lo, hi), in array-index coordinates, and keep
    # them between the first and last pixel the box touches so nothing outside leaks in
    first = math.floor(lo)
    last = min(math.ceil(hi), size) - 1
    pos = lo + (np.arange(n) + 0.5) * (hi - lo) / n - 0.5
    return np.clip(pos, first, max(first, last))


def resample_region(image: np.ndarray, box: Box, size: int) -> np.ndarray:
    """Bilinearly resample the pixels under ``box`` of a 2-D image to ``size x size``."""
    height, width = image.shape
    _check_inside(box, height, width)
    ys = _axis_samples(box.y_min, box.y_max, size, height)
    xs = _axis_samples(box.x_min, box.x_max, size, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def region_error(image: np.ndarray, patch: np.ndarray, box: Box) -> float:
    """Mean squared error between ``patch`` (1, 1, P, P) and the image region under ``box``."""
    p = patch.shape[-1]
    if patch.shape != (1, 1, p, p):
        raise ValueError(f"patch must be (1, 1, P, P), got {patch.shape}")
    target = resample_region(np.asarray(image).reshape(image.shape[-2:]), box, p)
    d = patch[0, 0].astype(np.float64) - target
    return float(np.mean(d * d))


def thi(region_scores: list[RegionScore], fallback_error: float = 0.0,
        w_bg: float = 1.0) -> tuple[float, bool]:
    """Priority-weighted mean of region errors.

    Returns ``(thi, fallback_used)``. With no regions the index falls back to
    ``w_bg * fallback_error``.
    """
    if not region_scores:
        return w_bg * fallback_error, True
    total_w = math.fsum(r.weight for r in region_scores)
    if total_w <= 0:
        raise ValueError("no weighted regions: every region has zero priority")
    value = math.fsum(r.weighted_error for r in region_scores) / total_w
    # rounding can leave the mean an ulp outside the errors it averages
    errs = [r.error for r in region_scores if r.weight > 0]
    return min(max(value, min(errs)), max(errs)), False


def flag(thi_value: float, threshold: float, tau_sat: float) -> tuple[bool, float]:
    if threshold <= 0 or tau_sat <= 0:
        raise ValueError("threshold and saturation must be positive")
    return bool(thi_value > threshold), min(1.0, thi_value / tau_sat)


MIN_CALIBRATION_VALUES = 10


def calibrate_threshold(healthy_thi_values) -> float:
    """Mean plus three standard deviations of THI on healthy data."""
    v = np.asarray(list(healthy_thi_values), dtype=np.float64)
    if v.size < MIN_CALIBRATION_VALUES:
        raise ValueError(
            f"need at least {MIN_CALIBRATION_VALUES} healthy values, got {v.size}")
    return float(v.mean() + 3 * v.std())


def build_report(region_scores, fallback_error, w_bg, threshold, tau_sat) -> THIReport:
    value, used = thi(region_scores, fallback_error, w_bg)
    flagged, severity = flag(value, threshold, tau_sat)
    return THIReport(thi=value, severity=severity, flagged=flagged, threshold=threshold,
                     fallback_used=used, region_scores=list(region_scores))
