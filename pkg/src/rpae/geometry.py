"""Box arithmetic for the region proposal pipeline.

Boxes are continuous pixel rectangles in the half-open convention
``[x_min, x_max) x [y_min, y_max)``, so ``area = (x_max - x_min) * (y_max - y_min)``.
Scalar functions take :class:`Box`; the ``*_array`` variants work on ``(N, 4)``
arrays in ``(x_min, y_min, x_max, y_max)`` order and are what the model uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box {coords}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min,
                "x_max": self.x_max, "y_max": self.y_max}

    @classmethod
    def from_array(cls, row) -> "Box":
        return cls(*(float(v) for v in row))


DEFAULT_ANCHOR_SHAPES = ((16, 16), (32, 8), (8, 32))


@dataclass(frozen=True)
class AnchorGridSpec:
    """Anchor shapes tiled at every feature cell; shapes are (width, height) in pixels."""

    feature_stride: int = 4
    shapes: tuple[tuple[float, float], ...] = field(default=DEFAULT_ANCHOR_SHAPES)

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(tuple(s) for s in self.shapes))
        if self.feature_stride < 1:
            raise ValueError("feature_stride must be >= 1")
        if not self.shapes:
            raise ValueError("at least one anchor shape is required")
        if any(w <= 0 or h <= 0 for w, h in self.shapes):
            raise ValueError(f"anchor shapes must be positive: {self.shapes}")

    @property
    def num_shapes(self) -> int:
        return len(self.shapes)


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.tx, self.ty, self.tw, self.th)):
            raise ValueError("non-finite box delta")


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) box arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


# ---------------------------------------------------------------------------
# anchors and box regression
# ---------------------------------------------------------------------------

def anchor_array(spec: AnchorGridSpec, feature_h: int, feature_w: int) -> np.ndarray:
    """Anchors as an (H*W*A, 4) array, row-major over cells, shape-minor."""
    if feature_h < 1 or feature_w < 1:
        raise ValueError("feature map must be at least 1x1")
    s = spec.feature_stride
    cy, cx = np.meshgrid(s * (np.arange(feature_h) + 0.5),
                         s * (np.arange(feature_w) + 0.5), indexing="ij")
    shapes = np.asarray(spec.shapes, dtype=np.float64)
    half_w = shapes[:, 0] / 2
    half_h = shapes[:, 1] / 2
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    boxes = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)
    return boxes.reshape(-1, 4)


def generate_anchors(spec: AnchorGridSpec, feature_h: int, feature_w: int) -> list[Box]:
    return [Box.from_array(r) for r in anchor_array(spec, feature_h, feature_w)]


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    gw = gts[..., 2] - gts[..., 0]
    gh = gts[..., 3] - gts[..., 1]
    tx = ((gts[..., 0] + gts[..., 2]) - (anchors[..., 0] + anchors[..., 2])) / (2 * aw)
    ty = ((gts[..., 1] + gts[..., 3]) - (anchors[..., 1] + anchors[..., 3])) / (2 * ah)
    return np.stack([tx, ty, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    cx = 0.5 * (anchors[..., 0] + anchors[..., 2]) + deltas[..., 0] * aw
    cy = 0.5 * (anchors[..., 1] + anchors[..., 3]) + deltas[..., 1] * ah
    w = aw * np.exp(deltas[..., 2])
    h = ah * np.exp(deltas[..., 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def encode_box(anchor: Box, gt: Box) -> BoxDelta:
    return BoxDelta(*(float(v) for v in encode_array(anchor.as_tuple(), gt.as_tuple())))


def decode_box(anchor: Box, delta: BoxDelta) -> Box:
    d = (delta.tx, delta.ty, delta.tw, delta.th)
    return Box.from_array(decode_array(anchor.as_tuple(), d))


def clip_array(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    """Clamp boxes into the image; sides collapsed below 1 px grow back to 1 px inside."""
    if width < 1 or height < 1:
        raise ValueError("image size must be >= 1")
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    for lo, hi, limit in ((0, 2, width), (1, 3, height)):
        b[:, lo] = np.clip(b[:, lo], 0, limit)
        b[:, hi] = np.clip(b[:, hi], 0, limit)
        thin = b[:, hi] - b[:, lo] < 1
        if thin.any():
            c = 0.5 * (b[thin, lo] + b[thin, hi])
            start = np.clip(c - 0.5, 0, limit - 1)
            b[thin, lo] = start
            b[thin, hi] = start + 1
    return b


def clip_box(b: Box, width: int, height: int) -> Box:
    return Box.from_array(clip_array(b.as_tuple(), width, height)[0])


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in descending score order."""
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    alive = np.ones(len(order), dtype=bool)
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        if len(rest):
            overlap = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            alive[pos + 1:] &= overlap <= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms(candidates: list[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    if not candidates:
        if not 0 < iou_threshold <= 1:
            raise ValueError("iou_threshold must be in (0, 1]")
        return []
    boxes = np.array([c.box.as_tuple() for c in candidates])
    scores = np.array([c.score for c in candidates])
    return [candidates[i] for i in nms_indices(boxes, scores, iou_threshold)]


# ---------------------------------------------------------------------------
# ROI max pooling
# ---------------------------------------------------------------------------

@dataclass
class RoiArgmax:
    """Winning feature cell (flat h*w index) per pooled element, plus the forward geometry."""

    indices: np.ndarray  # (C, out_h, out_w)
    feature_shape: tuple[int, int, int, int]


def _bin_edges(start: int, end: int, n: int) -> list[tuple[int, int]]:
    span = end - start
    edges = []
    for i in range(n):
        lo = start + (i * span) // n
        hi = start + -((-(i + 1) * span) // n)
        edges.append((lo, max(hi, lo + 1)))
    return edges


def roi_bins(roi: Box, feature_h: int, feature_w: int, out_h: int, out_w: int,
             stride: float):
    """Row and column bins (start, end) of ``roi`` projected onto the feature map."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    x0 = max(int(math.floor(roi.x_min / stride)), 0)
    y0 = max(int(math.floor(roi.y_min / stride)), 0)
    x1 = min(int(math.ceil(roi.x_max / stride)), feature_w)
    y1 = min(int(math.ceil(roi.y_max / stride)), feature_h)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"empty ROI: {roi.as_tuple()} projects outside the feature map")
    ys = [(min(a, y1 - 1), min(b, y1)) for a, b in _bin_edges(y0, y1, out_h)]
    xs = [(min(a, x1 - 1), min(b, x1)) for a, b in _bin_edges(x0, x1, out_w)]
    return ys, xs


def roi_pool(feature: np.ndarray, roi: Box, out_h: int, out_w: int, stride: float = 1.0):
    """Max-pool the part of ``feature`` (1, C, H, W) under ``roi`` into (1, C, out_h, out_w)."""
    if feature.ndim != 4 or feature.shape[0] != 1:
        raise ValueError(f"roi_pool expects a (1, C, H, W) feature, got {feature.shape}")
    _, c, h, w = feature.shape
    ys, xs = roi_bins(roi, h, w, out_h, out_w, stride)
    out = np.empty((1, c, out_h, out_w), dtype=feature.dtype)
    idx = np.empty((c, out_h, out_w), dtype=np.int64)
    for i, (ya, yb) in enumerate(ys):
        for j, (xa, xb) in enumerate(xs):
            region = feature[0, :, ya:yb, xa:xb].reshape(c, -1)
            k = region.argmax(axis=1)
            out[0, :, i, j] = region[np.arange(c), k]
            bw = xb - xa
            idx[:, i, j] = (ya + k // bw) * w + (xa + k % bw)
    return out, RoiArgmax(idx, feature.shape)


def roi_pool_backward(grad_out: np.ndarray, argmax: RoiArgmax) -> np.ndarray:
    """Route each pooled gradient to its winning cell; cells that won several bins accumulate."""
    _, c, h, w = argmax.feature_shape
    if grad_out.shape != (1,) + argmax.indices.shape:
        raise ValueError(
            f"roi_pool_backward: grad shape {grad_out.shape} does not match forward "
            f"output {(1,) + argmax.indices.shape}")
    grad = np.zeros((c, h * w), dtype=grad_out.dtype)
    rows = np.broadcast_to(np.arange(c)[:, None, None], argmax.indices.shape)
    np.add.at(grad, (rows.ravel(), argmax.indices.ravel()), grad_out[0].ravel())
    return grad.reshape(1, c, h, w)
