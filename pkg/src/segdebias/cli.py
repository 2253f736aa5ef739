"""Command-line surface chaining the pipeline stages through files.

Every stage reads and writes the documented binary formats; all randomness
flows from --seed.  Exit code 0 means the command completed and every output
was written.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import formats
from .bank import build_centroid_bank
from .core import DatasetManifest
from .debiasing import DEFAULT_THRESHOLD, ThresholdRefinement, debias_image
from .evaluation import (
    evaluate_predictions,
    per_class_fp_rows,
    report_json,
    report_text,
)
from .pipeline import SWEEPABLE, PipelineParams, sweep
from .selection import select_debiased, selection_rows
from .synth import SynthConfig, generate
from .trainloop import TrainConfig, train, write_metrics_csv

logger = logging.getLogger(__name__)


def _alpha_arg(value: str) -> float:
    alpha = float(value)
    if not (0.0 < alpha <= 1.0):
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha


def _threshold_arg(value: str) -> float:
    threshold = float(value)
    if not (0.0 <= threshold <= 1.0):
        raise argparse.ArgumentTypeError(f"threshold must lie in [0, 1], got {threshold}")
    return threshold


def _load_debiased(directory: Path, manifest: DatasetManifest):
    out = {}
    for record in manifest.records:
        path = directory / f"{record.image_id}.bin"
        if not path.exists():
            raise FileNotFoundError(f"missing debiased label {path}")
        out[record.image_id] = formats.read_label_map(path, manifest.num_classes)
    return out


def _cmd_synth(args) -> int:
    if args.config:
        payload = json.loads(Path(args.config).read_text())
        if "image_size" in payload:
            payload["image_size"] = tuple(payload["image_size"])
        if "problematic_classes" in payload:
            payload["problematic_classes"] = tuple(payload["problematic_classes"])
        config = SynthConfig(**payload)
    else:
        config = SynthConfig.standard()
    corpus = generate(config, args.out)
    print(f"wrote {len(corpus.records)} images and manifest under {args.out}")
    return 0


def _cmd_cluster(args) -> int:
    manifest = formats.read_manifest(args.manifest)
    labels = formats.load_pseudo_labels(manifest)
    bank = build_centroid_bank(
        manifest, labels, k_fg=args.kfg, k_bg=args.kbg, seed=args.seed
    )
    formats.write_centroid_bank(args.out, bank.canonically_sorted())
    n_fg = sum(len(v) for v in bank.foreground.values())
    print(f"wrote bank: {n_fg} foreground / {len(bank.background)} background centroids")
    return 0


def _cmd_select(args) -> int:
    bank = formats.read_centroid_bank(args.bank)
    cset = select_debiased(bank, args.alpha)
    formats.write_centroid_set(args.out, cset)
    print(f"wrote debiased centroids for classes {list(cset.classes())}")
    return 0


def _cmd_debias(args) -> int:
    manifest = formats.read_manifest(args.manifest)
    cset = formats.read_centroid_set(args.centroids)
    refine = ThresholdRefinement(args.threshold)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rewritten = 0
    for record in manifest.records:
        fmap = formats.read_feature_map(record.feature_path)
        pseudo = formats.read_label_map(record.label_path, manifest.num_classes)
        debiased = debias_image(fmap, pseudo, cset, record.truth_classes, refine)
        rewritten += int((debiased.data == -1).sum())
        formats.write_label_map(out_dir / f"{record.image_id}.bin", debiased)
    print(f"wrote {len(manifest.records)} debiased labels ({rewritten} pixels rewritten)")
    return 0


def _cmd_train(args) -> int:
    manifest = formats.read_manifest(args.manifest)
    debiased = _load_debiased(Path(args.debiased), manifest)
    config = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        ema_momentum=args.ema,
        seed=args.seed,
        refinement_threshold=args.refinement_threshold,
        complement=not args.no_complement,
        certainty_weighting=not args.no_certainty,
    )
    result = train(manifest, debiased, config)
    formats.write_checkpoint(args.out, result.teacher)
    write_metrics_csv(args.log, result.metrics)
    if args.pred_out:
        pred_dir = Path(args.pred_out)
        pred_dir.mkdir(parents=True, exist_ok=True)
        for image_id, label in result.predictions.items():
            formats.write_label_map(pred_dir / f"{image_id}.bin", label)
    final = result.metrics[-1].loss if result.metrics else float("nan")
    print(f"trained {config.epochs} epochs, final loss {final:.4f}")
    return 0


def _cmd_eval(args) -> int:
    manifest = formats.read_manifest(args.manifest)
    ground_truth = formats.load_ground_truth(manifest)
    if not ground_truth:
        raise ValueError("no record in the manifest carries a gt_path")
    pred_dir = Path(args.pred)
    predictions = {}
    for record in manifest.records:
        path = pred_dir / f"{record.image_id}.bin"
        if path.exists():
            predictions[record.image_id] = formats.read_label_map(path, manifest.num_classes)
    rep = evaluate_predictions(ground_truth, predictions, manifest.num_classes)
    formats.atomic_write_bytes(args.out, report_json(rep).encode("utf-8"))
    if args.fp_csv:
        with open(args.fp_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["class_id", "fp_share"])
            writer.writeheader()
            writer.writerows(per_class_fp_rows(rep))
    print(report_text(rep))
    return 0


def _cmd_export_centroids(args) -> int:
    bank = formats.read_centroid_bank(args.bank)
    cset = formats.read_centroid_set(args.centroids)
    rows = selection_rows(bank, cset.alpha)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["class_id", "image_id", "cluster_index", "dist", "selected"]
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} centroid rows to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    manifest = formats.read_manifest(args.manifest)
    features = formats.load_features(manifest)
    labels = formats.load_pseudo_labels(manifest)
    ground_truth = formats.load_ground_truth(manifest) or None
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("--values must list at least one number")
    base = PipelineParams(
        k_fg=args.kfg,
        k_bg=args.kbg,
        alpha=args.alpha,
        threshold=args.threshold,
        epochs=args.epochs,
        learning_rate=args.lr,
        ema_momentum=args.ema,
        seed=args.seed,
    )
    rows = sweep(manifest, features, labels, ground_truth, args.param, values, base)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["param", "value", "miou", "fp_rate", "fn_rate", "selection_accuracy"],
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segdebias",
        description="Pseudo-label debiasing via centroid banks and teacher-student completion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with exact oracles")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of generator knobs (defaults: standard corpus)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("cluster", help="build the per-image centroid bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kfg", type=int, default=2)
    p.add_argument("--kbg", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("select", help="aggregate debiased centroids from a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--alpha", type=_alpha_arg, default=0.40)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("debias", help="rewrite impostor foreground pixels to -1")
    p.add_argument("--manifest", required=True)
    p.add_argument("--centroids", required=True)
    p.add_argument("--threshold", type=_threshold_arg, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_debias)

    p = sub.add_parser("train", help="teacher-student training on debiased labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--debiased", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--ema", type=float, default=0.99)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--refinement-threshold", type=_threshold_arg, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", required=True, help="per-epoch metrics CSV")
    p.add_argument("--pred-out", help="also write final teacher predictions here")
    p.add_argument("--no-complement", action="store_true")
    p.add_argument("--no-certainty", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--fp-csv", help="optional per-class FP CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-centroids", help="per-centroid distance/selection CSV")
    p.add_argument("--bank", required=True)
    p.add_argument("--centroids", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_centroids)

    p = sub.add_parser("sweep", help="rerun the chain over one parameter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--param", choices=SWEEPABLE, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.add_argument("--kfg", type=int, default=2)
    p.add_argument("--kbg", type=int, default=2)
    p.add_argument("--alpha", type=_alpha_arg, default=0.40)
    p.add_argument("--threshold", type=_threshold_arg, default=DEFAULT_THRESHOLD)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--ema", type=float, default=0.99)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
