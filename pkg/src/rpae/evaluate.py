"""Evaluation over the four-class synthetic split: per-class THI, ROC-AUC and the two scenario tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import iou
from .model import RpaeModel
from .scoring import calibrate_threshold
from .synthdata import ON_TRACK

# placeholder threshold while collecting raw scores; flags are recomputed afterwards
_UNCALIBRATED = 1.0


def roc_auc(negatives, positives) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    neg = np.asarray(negatives, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise ValueError("roc_auc needs at least one score in each class")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def top_proposal_iou(model: RpaeModel, item, category: int = ON_TRACK) -> float:
    """IoU between the best-scoring proposal of ``category`` and that category's gt box."""
    gt = next((b for b, c in item.regions if c == category), None)
    if gt is None:
        raise ValueError("image has no gt box of the requested category")
    proposals = [p for p in model.forward(item.image)[0] if p.category_id == category]
    if not proposals:
        return 0.0
    return iou(max(proposals, key=lambda p: p.objectness).box, gt)


def image_scores(model, items) -> np.ndarray:
    return np.array([model.score(it.image, _UNCALIBRATED).thi for it in items])


@dataclass
class ModelSummary:
    class_mean: dict[str, float]
    auc: float
    scenario1_ratio: float
    scenario2_win_rate: float
    threshold: float
    flag_rate: dict[str, float]


@dataclass
class EvalReport:
    rpae: ModelSummary
    mean_top_iou: float
    baseline: ModelSummary | None = None
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"rpae": asdict(self.rpae), "mean_top_iou": self.mean_top_iou,
             "baseline": asdict(self.baseline) if self.baseline else None}
        return d


def summarize(scores: dict[str, np.ndarray], threshold: float) -> ModelSummary:
    means = {cls: float(v.mean()) for cls, v in scores.items() if v.size}
    pairs = scores["priority_pairs"]
    n_pairs = len(pairs) // 2
    wins = pairs[0:2 * n_pairs:2] > pairs[1:2 * n_pairs:2]
    off = means["off_track"]
    return ModelSummary(
        class_mean=means,
        auc=roc_auc(scores["healthy"], scores["on_track"]),
        scenario1_ratio=means["on_track"] / off if off > 0 else float("inf"),
        scenario2_win_rate=float(wins.mean()) if n_pairs else float("nan"),
        threshold=threshold,
        flag_rate={cls: float((v > threshold).mean()) for cls, v in scores.items() if v.size},
    )


def evaluate(model: RpaeModel, dataset, baseline=None) -> EvalReport:
    """Score every eval image; thresholds are calibrated on the healthy training split."""
    present = {cls for cls, items in dataset.eval.items() if items}
    missing = {"healthy", "on_track", "off_track", "priority_pairs"} - present
    if missing or not dataset.train:
        raise ValueError(f"dataset lacks splits: {sorted(missing) or ['train']}")
    per_image = []
    rpae_scores = {cls: image_scores(model, items) for cls, items in dataset.eval.items()}
    threshold = calibrate_threshold(image_scores(model, dataset.train))
    ious = [top_proposal_iou(model, it) for items in dataset.eval.values() for it in items]
    report = EvalReport(summarize(rpae_scores, threshold), float(np.mean(ious)))
    base_scores = None
    if baseline is not None:
        base_scores = {cls: image_scores(baseline, items) for cls, items in dataset.eval.items()}
        b_threshold = calibrate_threshold(image_scores(baseline, dataset.train))
        report.baseline = summarize(base_scores, b_threshold)
    k = 0
    for cls, items in dataset.eval.items():
        for i, _ in enumerate(items):
            row = {"class": cls, "index": i, "thi": float(rpae_scores[cls][i]),
                   "top_iou": ious[k]}
            if base_scores is not None:
                row["baseline_error"] = float(base_scores[cls][i])
            per_image.append(row)
            k += 1
    report.per_image = per_image
    return report
