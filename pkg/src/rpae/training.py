"""Anchor matching, the combined RPN + priority-weighted reconstruction loss, training loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import nn
from .geometry import Box, encode_array, iou_matrix, roi_pool_backward
from .model import BaselineModel, RpaeModel, RpnOutput
from .scoring import resample_region

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    lam: float = 1.0
    box_jitter: float = 4.0
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    anchor_samples: int = 32
    max_positives: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.neg_iou < self.pos_iou < 1:
            raise ValueError("need 0 < neg_iou < pos_iou < 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.box_jitter < 0:
            raise ValueError("box_jitter must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 1 <= self.max_positives <= self.anchor_samples:
            raise ValueError("need 1 <= max_positives <= anchor_samples")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class AnchorLabels:
    labels: np.ndarray       # (M,) POSITIVE / NEGATIVE / IGNORE
    gt_index: np.ndarray     # (M,) matched gt for positives, -1 elsewhere
    category: np.ndarray     # (M,) category of the matched gt, -1 elsewhere
    box_targets: np.ndarray  # (M, 4) regression targets, zero where not positive

    def sampled(self, rng: np.random.Generator, n: int, max_pos: int) -> "AnchorLabels":
        """Keep at most ``max_pos`` random positives and fill up to ``n`` with negatives."""
        pos = np.flatnonzero(self.labels == POSITIVE)
        neg = np.flatnonzero(self.labels == NEGATIVE)
        if len(pos) > max_pos:
            pos = np.sort(rng.choice(pos, size=max_pos, replace=False))
        n_neg = min(len(neg), n - len(pos))
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
        labels = np.full_like(self.labels, IGNORE)
        labels[pos] = POSITIVE
        labels[neg] = NEGATIVE
        keep = labels == POSITIVE
        return AnchorLabels(labels, np.where(keep, self.gt_index, -1),
                            np.where(keep, self.category, -1),
                            np.where(keep[:, None], self.box_targets, 0.0))


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def match_anchors(anchors, gts, pos_t: float = 0.7, neg_t: float = 0.3) -> AnchorLabels:
    """Label anchors against ground-truth ``(Box, category_id)`` pairs.

    Positive when the best IoU reaches ``pos_t`` or the anchor is (one of) the
    best matches of some gt box; negative below ``neg_t``; ignored otherwise.
    """
    a = _as_array(anchors)
    m = len(a)
    if not gts:
        return AnchorLabels(np.zeros(m, np.int8), np.full(m, -1), np.full(m, -1),
                            np.zeros((m, 4)))
    g = _as_array([b for b, _ in gts])
    cats = np.array([c for _, c in gts])
    ious = iou_matrix(a, g)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(m), best_gt]
    labels = np.full(m, IGNORE, dtype=np.int8)
    labels[best_iou < neg_t] = NEGATIVE
    labels[best_iou >= pos_t] = POSITIVE
    col_best = ious.max(axis=0)
    for j in range(len(g)):
        if col_best[j] > 0:
            labels[ious[:, j] == col_best[j]] = POSITIVE
    pos = labels == POSITIVE
    gt_index = np.where(pos, best_gt, -1)
    targets = np.zeros((m, 4))
    targets[pos] = encode_array(a[pos], g[best_gt[pos]])
    return AnchorLabels(labels, gt_index, np.where(pos, cats[best_gt], -1), targets)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def rpn_loss_terms(rpn: RpnOutput, labels: AnchorLabels, num_anchors: int, index: int = 0,
                   with_grad: bool = False):
    """Objectness BCE + box smooth-L1 + category CE for one image.

    Returns ``(terms, grads)``: ``terms`` maps name to value, ``grads`` is the
    flat ``(obj, deltas, logits)`` gradient triple (``None`` unless requested).
    """
    obj, deltas, logits = rpn.flat(index, num_anchors)
    sampled = labels.labels != IGNORE
    pos = labels.labels == POSITIVE
    terms = {"objectness": 0.0, "box": 0.0, "category": 0.0}
    grads = None
    if with_grad:
        grads = (np.zeros_like(obj), np.zeros_like(deltas), np.zeros_like(logits))
    if sampled.any():
        target = (labels.labels[sampled] == POSITIVE).astype(np.float64)
        terms["objectness"] = nn.bce(obj[sampled], target)
        if with_grad:
            grads[0][sampled] = nn.bce_backward(obj[sampled], target)
    if pos.any():
        terms["box"] = nn.smooth_l1(deltas[pos], labels.box_targets[pos])
        terms["category"] = nn.cross_entropy(logits[pos], labels.category[pos])
        if with_grad:
            grads[1][pos] = nn.smooth_l1_backward(deltas[pos], labels.box_targets[pos])
            grads[2][pos] = nn.cross_entropy_backward(logits[pos], labels.category[pos])
    return terms, grads


def rpn_loss(rpn: RpnOutput, labels: AnchorLabels, num_anchors: int, index: int = 0) -> float:
    return sum(rpn_loss_terms(rpn, labels, num_anchors, index)[0].values())


def region_targets(model: RpaeModel, image: np.ndarray, gts) -> np.ndarray:
    """Input under the pooled extent of each gt box, resampled to P x P: (R, P, P)."""
    p = model.config.patch_size
    img = image.reshape(image.shape[-2:])
    if not gts:
        return np.zeros((0, p, p))
    return np.stack([resample_region(img, model.region_box(b), p) for b, _ in gts])


def jitter_boxes(rng: np.random.Generator, gts, amount: float, width: int, height: int):
    """Shift every edge of every gt box by up to ``amount`` pixels, staying inside the image."""
    out = []
    for b, c in gts:
        x0, y0, x1, y1 = np.array(b.as_tuple()) + rng.uniform(-amount, amount, size=4)
        x0, x1 = np.clip([x0, x1], 0, width)
        y0, y1 = np.clip([y0, y1], 0, height)
        if x1 - x0 < 1 or y1 - y0 < 1:
            out.append((b, c))
        else:
            out.append((Box(float(x0), float(y0), float(x1), float(y1)), c))
    return out


def _reconstruction(model: RpaeModel, feature, images, gts_list, targets_list, scale,
                    dfeature=None):
    """Priority-weighted reconstruction error per image over its gt boxes.

    When ``dfeature`` is given, gradients of ``sum_i scale * recon_i`` are
    accumulated into the decoders and ``dfeature``.
    """
    cfg = model.config
    prio = cfg.priorities
    p = cfg.patch_size
    recon = np.zeros(len(images))
    by_cat: dict[int, list] = {}
    for i, gts in enumerate(gts_list):
        if not gts:
            continue
        total_w = sum(prio[c] for _, c in gts)
        if total_w <= 0:
            raise ValueError("no weighted regions: every gt region has zero priority")
        targets = targets_list[i] if targets_list is not None else \
            region_targets(model, images[i], gts)
        for r, (box, c) in enumerate(gts):
            pooled, arg = model.pool_region(feature[i:i + 1], box)
            by_cat.setdefault(c, []).append((i, pooled, arg, targets[r], prio[c] / total_w))
    for c, items in by_cat.items():
        pooled = np.concatenate([it[1] for it in items])
        patches, cache = model.decode_pooled(pooled, c)
        diff = patches[:, 0].astype(np.float64) - np.stack([it[3] for it in items])
        errs = (diff * diff).mean(axis=(1, 2))
        for (i, _, _, _, w), e in zip(items, errs):
            recon[i] += w * e
        if dfeature is not None:
            w = np.array([it[4] for it in items])
            dpatch = (scale * w[:, None, None] * 2.0 / (p * p) * diff)[:, None]
            dpooled = model.decoders[c].backward(dpatch.astype(patches.dtype), cache)
            for (i, _, arg, _, _), g in zip(items, dpooled):
                dfeature[i:i + 1] += roi_pool_backward(g[None], arg)
    return recon


@dataclass
class LossBreakdown:
    rpn: float
    recon: float
    total: float


def batch_loss(model: RpaeModel, images, gts_list, labels_list, lam: float,
               backward: bool = False, targets_list=None) -> LossBreakdown:
    """Mean over the batch of ``rpn_loss + lam * reconstruction_loss``.

    With ``backward`` the gradient of that mean is accumulated into the model.
    """
    n = len(images)
    a = model.config.num_anchors
    feature, enc_cache = model.encode_with_cache(images)
    rpn, rpn_cache = model.rpn_forward_with_cache(feature)
    hf, wf = feature.shape[2:]
    grads = RpnOutput(np.zeros_like(rpn.objectness), np.zeros_like(rpn.deltas),
                      np.zeros_like(rpn.category_logits))
    rpn_total = 0.0
    for i in range(n):
        terms, g = rpn_loss_terms(rpn, labels_list[i], a, i, with_grad=backward)
        rpn_total += sum(terms.values())
        if backward:
            o, d, c = RpnOutput.unflat(*g, a, hf, wf)
            grads.objectness[i] = o / n
            grads.deltas[i] = d / n
            grads.category_logits[i] = c / n
    dfeature = np.zeros_like(feature) if backward and lam > 0 else None
    recon = _reconstruction(model, feature, images, gts_list, targets_list, lam / n, dfeature)
    if backward:
        dfeat_rpn = model.rpn_backward(grads, rpn_cache)
        dfeature = dfeat_rpn if dfeature is None else dfeature + dfeat_rpn
        model.encode_backward(dfeature, enc_cache)
    rpn_mean = rpn_total / n
    recon_mean = float(recon.mean())
    return LossBreakdown(rpn_mean, recon_mean, rpn_mean + lam * recon_mean)


def reconstruction_loss(model: RpaeModel, image: np.ndarray, gts) -> float:
    """Priority-weighted mean region error of one image over its gt boxes; 0 without gts."""
    if not gts:
        return 0.0
    feature = model.encode(image)
    return float(_reconstruction(model, feature, image, [gts], None, 1.0)[0])


def total_loss(model: RpaeModel, image: np.ndarray, gts, lam: float,
               labels: AnchorLabels | None = None, cfg: TrainConfig | None = None,
               backward: bool = False) -> float:
    """``rpn_loss + lam * reconstruction_loss`` for one image, every labeled anchor in play."""
    cfg = cfg or TrainConfig()
    if labels is None:
        labels = match_anchors(model.anchors, gts, cfg.pos_iou, cfg.neg_iou)
    return batch_loss(model, image, [gts], [labels], lam, backward).total


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

LOG_FIELDS = ("epoch", "rpn_loss", "recon_loss", "total")


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model: RpaeModel, dataset, config: TrainConfig = TrainConfig(),
          log_path=None, checkpoint_path=None):
    """Train the RPAE on labeled healthy scenes. Returns ``(model, per-epoch log)``."""
    items = list(dataset)
    if not items:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    cfg = model.config
    images = np.concatenate([it.image for it in items]).astype(model.dtype)
    gts = [list(it.regions) for it in items]
    labels = [match_anchors(model.anchors, g, config.pos_iou, config.neg_iou) for g in gts]
    opt = nn.Adam(model.parameters(), lr=config.learning_rate)
    model.zero_grad()
    rows = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        for idx in _batches(rng, len(items), config.batch_size):
            sampled = [labels[i].sampled(rng, config.anchor_samples, config.max_positives)
                       for i in idx]
            # decoders are taught on perturbed gt boxes so imprecise proposals still decode well
            recon_gts = [jitter_boxes(rng, gts[i], config.box_jitter, cfg.image_width,
                                      cfg.image_height) if config.box_jitter else gts[i]
                         for i in idx]
            out = batch_loss(model, images[idx], recon_gts, sampled, config.lam, backward=True)
            opt.step()
            sums += len(idx) * np.array([out.rpn, out.recon, out.total])
        sums /= len(items)
        rows.append({"epoch": epoch, "rpn_loss": sums[0], "recon_loss": sums[1],
                     "total": sums[2]})
        log.info("epoch %d rpn %.5f recon %.5f total %.5f", epoch, *sums)
    if log_path is not None:
        write_loss_log(log_path, rows)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(checkpoint_path, model)
    return model, rows


def train_baseline(model: BaselineModel, images, config: TrainConfig = TrainConfig(),
                   log_path=None, checkpoint_path=None):
    """Whole-image reconstruction training. ``images`` are arrays or LabeledImages."""
    arrs = [getattr(im, "image", im) for im in images]
    if not arrs:
        raise ValueError("empty training dataset")
    data = np.concatenate(arrs).astype(model.dtype)
    rng = np.random.default_rng(config.seed)
    opt = nn.Adam(model.parameters(), lr=config.learning_rate)
    model.zero_grad()
    rows = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in _batches(rng, len(data), config.batch_size):
            batch = data[idx]
            out, cache = model.forward_with_cache(batch)
            total += nn.mse(out, batch) * len(idx)
            model.backward(nn.mse_backward(out, batch), cache)
            opt.step()
        total /= len(data)
        rows.append({"epoch": epoch, "rpn_loss": 0.0, "recon_loss": total, "total": total})
        log.info("baseline epoch %d mse %.6f", epoch, total)
    if log_path is not None:
        write_loss_log(log_path, rows)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(checkpoint_path, model)
    return model, rows


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
