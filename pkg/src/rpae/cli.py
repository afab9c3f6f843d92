"""Command line entry point: ``rpae gen-data | train | score | eval | verify``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import verify
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import evaluate
from .geometry import AnchorGridSpec
from .model import BaselineModel, ModelConfig, RpaeModel
from .scoring import CategoryConfig, calibrate_threshold
from .synthdata import CATEGORY_NAMES, generate_dataset, load_dataset, load_png, save_dataset
from .training import TrainConfig, train, train_baseline

log = logging.getLogger("rpae")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

# config keys that are not plain ModelConfig/TrainConfig scalars
ANCHOR_KEY = "anchor_shapes"
PRIORITY_PREFIX = "priority_"


class CliError(Exception):
    """A runtime failure with a message meant for the operator."""


# ---------------------------------------------------------------------------
# flat config
# ---------------------------------------------------------------------------

def _scalar_fields(cls) -> set[str]:
    return {f.name for f in fields(cls)} - {"anchors", "categories"}


def config_keys(category_names=CATEGORY_NAMES) -> set[str]:
    return (_scalar_fields(ModelConfig) | _scalar_fields(TrainConfig) | {ANCHOR_KEY}
            | {PRIORITY_PREFIX + n for n in category_names})


def parse_config(raw: dict, category_names=CATEGORY_NAMES) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat config dict into model and training configs; unknown keys are errors.

    ``seed`` is shared by both. Priorities are given per category as
    ``priority_<name>``; anchor shapes as ``anchor_shapes: [[w, h], ...]``.
    """
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    unknown = sorted(set(raw) - config_keys(category_names))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    model_kw = {k: v for k, v in raw.items() if k in _scalar_fields(ModelConfig)}
    train_kw = {k: v for k, v in raw.items() if k in _scalar_fields(TrainConfig)}
    defaults = {c.name: c.priority for c in ModelConfig().categories}
    model_kw["categories"] = tuple(
        CategoryConfig(n, float(raw.get(PRIORITY_PREFIX + n, defaults.get(n, 1.0))))
        for n in category_names)
    stride = model_kw.get("feature_stride", ModelConfig.feature_stride)
    if ANCHOR_KEY in raw:
        model_kw["anchors"] = AnchorGridSpec(stride, tuple(tuple(s) for s in raw[ANCHOR_KEY]))
    else:
        model_kw["anchors"] = AnchorGridSpec(stride)
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    try:
        raw = json.loads(Path(path).read_text())
        return parse_config(raw)
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"{path}: bad config ({exc})") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    dataset = generate_dataset(args.train, args.eval, seed=args.seed)
    try:
        manifest = save_dataset(dataset, args.out)
    except OSError as exc:
        raise CliError(f"{args.out}: cannot write dataset ({exc})") from exc
    print(manifest)
    return EXIT_OK


def _load_split(data, splits):
    try:
        return load_dataset(data, splits)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"{data}: bad dataset ({exc})") from exc


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    dataset = _load_split(args.data, ("train",))
    if not dataset.train:
        raise CliError(f"{args.data}: training split is empty")
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".loss.csv")
    if args.baseline:
        model, _ = train_baseline(BaselineModel(model_cfg), dataset.train, train_cfg, log_path)
    else:
        model, _ = train(RpaeModel(model_cfg), dataset.train, train_cfg, log_path)
    healthy = [model.score(it.image, 1.0).thi for it in dataset.train]
    if len(healthy) >= 10:
        model.threshold = calibrate_threshold(healthy)
    else:
        log.warning("fewer than 10 training images; no threshold calibrated")
    save_checkpoint(args.out, model)
    print(json.dumps({"checkpoint": str(args.out), "loss_log": str(log_path),
                      "threshold": model.threshold}))
    return EXIT_OK


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"{path}: cannot load checkpoint ({exc})") from exc


def cmd_score(args) -> int:
    model = _load_model(args.model)
    try:
        image = load_png(args.image)
    except (OSError, ValueError) as exc:
        raise CliError(f"{args.image}: cannot read image ({exc})") from exc
    cfg = model.config
    if image.shape[2:] != (cfg.image_height, cfg.image_width):
        raise CliError(f"{args.image}: size {image.shape[3]}x{image.shape[2]} does not match "
                       f"the model's {cfg.image_width}x{cfg.image_height}")
    threshold = args.threshold if args.threshold is not None else model.threshold
    if threshold is None:
        raise CliError("no --threshold given and the checkpoint carries no calibrated one")
    report = model.score(image, threshold)
    names = [c.name for c in cfg.categories]
    print(json.dumps(report.to_dict(names), indent=1))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    if not isinstance(model, RpaeModel):
        raise CliError(f"{args.model}: --model must be an RPAE checkpoint")
    baseline = _load_model(args.baseline_model) if args.baseline_model else None
    if baseline is not None and not isinstance(baseline, BaselineModel):
        raise CliError(f"{args.baseline_model}: not a baseline checkpoint")
    dataset = _load_split(args.data, ("train", "eval"))
    try:
        report = evaluate(model, dataset, baseline)
    except ValueError as exc:
        raise CliError(f"{args.data}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    (out / "eval_report.json").write_text(json.dumps(data, indent=1) + "\n")
    columns = ["class", "index", "thi", "top_iou"] + (["baseline_error"] if baseline else [])
    with open(out / "eval_scores.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(report.per_image)
    print(json.dumps(data, indent=1))
    return EXIT_OK


def cmd_verify(args) -> int:
    ok, results, seconds = verify.run_all(print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
    return EXIT_OK if ok else EXIT_FAILURE


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic PNG+JSON dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--train", type=int, default=1024, help="healthy training images")
    g.add_argument("--eval", type=int, default=100, help="eval images per class")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the RPAE (or the baseline autoencoder)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="flat JSON config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss-log CSV (default: <out>.loss.csv)")
    t.add_argument("--baseline", action="store_true", help="train the whole-image baseline")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="print the THI report of one image as JSON")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--threshold", type=float, help="default: the checkpoint's calibrated one")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="evaluate on a dataset's eval split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baseline-model")
    e.add_argument("--out", default=".", help="directory for eval_report.json and eval_scores.csv")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="gradient and geometry self-checks")
    v.set_defaults(func=cmd_verify)
    return p


def _validate(parser, args):
    for name in ("train", "eval"):
        if args.command == "gen-data" and getattr(args, name) < 0:
            parser.error(f"--{name} must be >= 0")
    if args.command == "score" and args.threshold is not None and not np.isfinite(args.threshold):
        parser.error("--threshold must be finite")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"rpae: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
