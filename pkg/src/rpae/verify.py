"""Self-checks: finite-difference gradients of every differentiable op and geometry oracles.

All gradient checks run in float64 on small seeded shapes. Functions under test
are looked up through their modules at call time, so a test can swap one out
(for example a broken backward) and watch the suite fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import geometry, model as model_mod, nn, training
from .geometry import Box

GRAD_TOLERANCE = 1e-3
IOU_TOLERANCE = 1e-3
ROUNDTRIP_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    n_cases: int

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<22} max_error={self.max_error:.3e} "
                f"tol={self.tolerance:.0e} cases={self.n_cases}")


def _from_report(r: nn.GradCheckReport) -> CheckResult:
    return CheckResult(r.name, r.max_rel_error, r.tolerance, r.n_checked)


def _distinct(rng, shape, spacing=0.01):
    """Values with pairwise gaps >= ``spacing`` so argmax choices survive a 1e-3 nudge."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - 0.5 * n * spacing).reshape(shape)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _linear_probe(rng, out):
    """A fixed random projection turns any output into a scalar loss."""
    return rng.standard_normal(out.shape)


def _op_check(name, forward, backward, arrays, rng):
    out = forward()
    r = _linear_probe(rng, out)
    grads = backward(r)
    return _from_report(nn.finite_diff_check(
        lambda: float((forward() * r).sum()), arrays, grads, GRAD_TOLERANCE, name=name))


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def check_conv2d(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    return _op_check("conv2d", lambda: nn.conv2d(x, w, b, 2, 1)[0],
                     lambda r: nn.conv2d_backward(r, nn.conv2d(x, w, b, 2, 1)[1]),
                     [x, w, b], rng)


def check_conv_transpose2d(seed=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, 4, 4))
    b = rng.standard_normal(2)
    return _op_check("conv_transpose2d", lambda: nn.conv_transpose2d(x, w, b, 2, 1)[0],
                     lambda r: nn.conv_transpose2d_backward(
                         r, nn.conv_transpose2d(x, w, b, 2, 1)[1]),
                     [x, w, b], rng)


def check_pointwise(kind, seed=2):
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, (2, 3, 4, 4)) * 3
    return _op_check(f"pointwise[{kind}]", lambda: nn.pointwise(x, kind)[0],
                     lambda r: [nn.pointwise_backward(r, nn.pointwise(x, kind)[1])], [x], rng)


def check_max_pool2d(seed=3):
    rng = np.random.default_rng(seed)
    x = _distinct(rng, (2, 2, 6, 6))
    return _op_check("max_pool2d", lambda: nn.max_pool2d(x, 2, 2)[0],
                     lambda r: [nn.max_pool2d_backward(r, nn.max_pool2d(x, 2, 2)[1])], [x], rng)


def check_softmax(seed=4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 3, 3))
    return _op_check("softmax_channels", lambda: nn.softmax_channels(x),
                     lambda r: [nn.softmax_channels_backward(r, nn.softmax_channels(x))],
                     [x], rng)


def check_roi_pool(seed=5):
    rng = np.random.default_rng(seed)
    f = _distinct(rng, (1, 3, 8, 8))
    roi = Box(5, 3, 27, 30)
    return _op_check("roi_pool", lambda: geometry.roi_pool(f, roi, 3, 3, 4)[0],
                     lambda r: [geometry.roi_pool_backward(
                         r, geometry.roi_pool(f, roi, 3, 3, 4)[1])], [f], rng)


def check_column_median(seed=6):
    rng = np.random.default_rng(seed)
    f = _distinct(rng, (2, 3, 6, 5))
    return _op_check("column_median", lambda: model_mod.column_median(f)[0],
                     lambda r: [model_mod.column_median_backward(
                         r, model_mod.column_median(f)[1])], [f], rng)


def _loss_check(name, loss, backward, pred, target):
    grad = backward(pred, target)
    return _from_report(nn.finite_diff_check(lambda: loss(pred, target), [pred], [grad],
                                             GRAD_TOLERANCE, name=name))


def check_losses(seed=7):
    rng = np.random.default_rng(seed)
    out = []
    pred, target = rng.standard_normal((2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    out.append(_loss_check("mse", nn.mse, nn.mse_backward, pred, target))
    prob = rng.uniform(0.05, 0.95, size=20)
    out.append(_loss_check("bce", nn.bce, nn.bce_backward, prob,
                           (rng.uniform(size=20) > 0.5).astype(np.float64)))
    target = rng.standard_normal((10, 4))
    # keep residuals clear of the |d| = beta knee
    diff = _away_from_zero(rng, (10, 4), 0.05) * 2
    diff[np.abs(np.abs(diff) - 1.0) < 0.05] += 0.2
    out.append(_loss_check("smooth_l1", nn.smooth_l1, nn.smooth_l1_backward,
                           target + diff, target))
    logits = rng.standard_normal((12, 3))
    out.append(_loss_check("cross_entropy", nn.cross_entropy, nn.cross_entropy_backward,
                           logits, rng.integers(0, 3, size=12)))
    return out


def tiny_model_config(**overrides) -> model_mod.ModelConfig:
    kw = dict(image_height=16, image_width=16, latent_channels=4, rpn_channels=6,
              anchors=geometry.AnchorGridSpec(4, ((8, 8), (16, 4), (4, 16))),
              patch_size=8, pooled_size=2, seed=3)
    kw.update(overrides)
    return model_mod.ModelConfig(**kw)


def check_total_loss(seed=8):
    """End to end: encoder, RPN head, ROI pooling and decoders under rpn + lam * recon."""
    rng = np.random.default_rng(seed)
    m = model_mod.RpaeModel(tiny_model_config()).astype(np.float64)
    for p in m.parameters():
        # nonzero biases keep relu inputs away from exact zeros
        if p.name.endswith(".bias"):
            p.value[...] = rng.uniform(0.05, 0.2, size=p.value.shape)
    image = rng.uniform(0, 1, size=(1, 1, 16, 16))
    gts = [(Box(4, 0, 12, 16), 0), (Box(0, 0, 4, 16), 1), (Box(12, 0, 16, 16), 1)]
    labels = training.match_anchors(m.anchors, gts)
    m.zero_grad()
    training.total_loss(m, image, gts, 1.0, labels=labels, backward=True)
    params = m.parameters()
    return _from_report(nn.finite_diff_check(
        lambda: training.total_loss(m, image, gts, 1.0, labels=labels),
        [p.value for p in params], [p.grad for p in params], GRAD_TOLERANCE,
        n_coords=80, seed=seed, name="total_loss", kink_step=1e-6))


# ---------------------------------------------------------------------------
# geometry oracles
# ---------------------------------------------------------------------------

def raster_iou(a: Box, b: Box, scale: int = 4, size: int = 40) -> float:
    """IoU by counting sub-pixels; exact for coordinates on a 1/``scale`` grid."""
    def mask(box):
        m = np.zeros((size * scale, size * scale), dtype=bool)
        m[round(box.y_min * scale):round(box.y_max * scale),
          round(box.x_min * scale):round(box.x_max * scale)] = True
        return m
    ma, mb = mask(a), mask(b)
    union = (ma | mb).sum()
    return float((ma & mb).sum() / union)


def _random_box(rng, size=32, scale=4):
    x0, x1 = np.sort(rng.choice(size * scale + 1, 2, replace=False)) / scale
    y0, y1 = np.sort(rng.choice(size * scale + 1, 2, replace=False)) / scale
    return Box(x0, y0, x1, y1)


def check_iou(n_pairs=1000, seed=9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        a = _random_box(rng)
        # half the pairs are nudged copies so high-overlap cases are common
        b = _random_box(rng)
        if rng.uniform() < 0.5:
            c = np.clip(np.array(a.as_tuple()) + rng.integers(-8, 9, 4) / 4, 0, 32)
            if c[2] > c[0] and c[3] > c[1]:
                b = Box(*c)
        worst = max(worst, abs(geometry.iou(a, b) - raster_iou(a, b)))
    return CheckResult("iou_raster", worst, IOU_TOLERANCE, n_pairs)


def greedy_nms_oracle(boxes, scores, threshold):
    """Textbook greedy NMS: take the best remaining box, drop its overlaps, repeat."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        keep.append(best)
        bb = Box(*boxes[best])
        remaining = [i for i in remaining
                     if i != best and geometry.iou(bb, Box(*boxes[i])) <= threshold]
    return keep


def check_nms(n_instances=5, n_boxes=200, seed=10):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for t in range(n_instances):
        boxes = np.array([_random_box(rng).as_tuple() for _ in range(n_boxes)])
        # coarse scores force ties so the stable ordering is exercised
        scores = rng.integers(0, 40, size=n_boxes) / 40.0
        thr = (0.3, 0.5, 0.7, 0.1, 1.0)[t % 5]
        got = geometry.nms_indices(boxes, scores, thr).tolist()
        mismatches += got != greedy_nms_oracle(boxes, scores, thr)
    return CheckResult("nms_bruteforce", float(mismatches), 0.0, n_instances)


def check_roundtrip(n=1000, seed=11):
    rng = np.random.default_rng(seed)
    anchors = np.array([_random_box(rng, 64, 1).as_tuple() for _ in range(n)])
    gts = np.array([_random_box(rng, 64, 1).as_tuple() for _ in range(n)])
    back = geometry.decode_array(anchors, geometry.encode_array(anchors, gts))
    return CheckResult("encode_decode", float(np.abs(back - gts).max()),
                       ROUNDTRIP_TOLERANCE, n)


# ---------------------------------------------------------------------------

def gradient_checks() -> list[CheckResult]:
    return [check_conv2d(), check_conv_transpose2d(), check_pointwise("relu"),
            check_pointwise("sigmoid"), check_max_pool2d(), check_softmax(),
            check_roi_pool(), check_column_median(), *check_losses(), check_total_loss()]


def geometry_checks() -> list[CheckResult]:
    return [check_iou(), check_nms(), check_roundtrip()]


def run_all(echo=None) -> tuple[bool, list[CheckResult], float]:
    """Run every check; ``echo`` (e.g. ``print``) receives one line per result."""
    start = time.perf_counter()
    results = []
    for group in (gradient_checks, geometry_checks):
        for r in group():
            results.append(r)
            if echo:
                echo(r.line())
    return all(r.passed for r in results), results, time.perf_counter() - start
