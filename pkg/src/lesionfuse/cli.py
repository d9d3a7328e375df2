"""Command-line interface.

Subcommands: preprocess, synth, train, evaluate, sweep, stats, report.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import experiment as exp
from .data import make_folds, parse_manifest, write_manifest
from .evaluation import METRIC_ORDER, evaluate_probabilities
from .preprocess import ColorConstancyConfig, load_image, save_image, shades_of_gray
from .stats import ScoreMatrix, compare_models
from .synth import Informativeness, generate_synthetic
from .trainer import LesionDataset, evaluate_model, load_checkpoint

import torch


def _add_common_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config YAML")
    p.add_argument("--manifest", type=Path, help="dataset manifest CSV")
    p.add_argument("--backbone", help="backbone name (overrides config)")
    p.add_argument("--scenario", choices=["image_only", "fused"],
                   help="single scenario (overrides config)")
    p.add_argument("--cf", type=float, help="combination factor (overrides config)")
    p.add_argument("--folds", type=int, help="fold count (overrides config)")
    p.add_argument("--seed", type=int, help="fold/model seed (overrides config)")
    p.add_argument("--out", type=Path, help="output directory (overrides config)")
    p.add_argument("--pretrained", action="store_true",
                   help="load published backbone weights")


def _experiment_config(args: argparse.Namespace) -> exp.ExperimentConfig:
    if args.config:
        config = exp.ExperimentConfig.from_yaml(args.config)
    elif args.manifest:
        config = exp.ExperimentConfig(manifest=str(args.manifest))
    else:
        raise SystemExit("either --config or --manifest is required")
    updates = {}
    if args.manifest:
        updates["manifest"] = str(args.manifest)
    if args.backbone:
        updates["backbones"] = (args.backbone,)
    if args.scenario:
        updates["scenarios"] = (args.scenario,)
    if args.cf is not None:
        updates["cf_values"] = (args.cf,)
    if args.folds is not None:
        updates["folds"] = args.folds
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = str(args.out)
    if args.pretrained:
        updates["pretrained"] = True
    return dataclasses.replace(config, **updates) if updates else config


def cmd_preprocess(args: argparse.Namespace) -> int:
    manifest = parse_manifest(args.manifest, args.root)
    config = ColorConstancyConfig(
        p="infinity" if args.p == "infinity" else float(args.p),
        output_gamma=args.gamma,
    )
    out = Path(args.out)
    for record in manifest:
        corrected = shades_of_gray(load_image(manifest.image_file(record)), config)
        target = out / record.image_path
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(corrected, target)
    rebased = dataclasses.replace(manifest, root=out)
    write_manifest(rebased, out / "manifest.csv")
    print(f"wrote {len(manifest)} corrected images under {out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    proportions = json.loads(args.proportions) if args.proportions else None
    manifest = generate_synthetic(
        args.out, args.size,
        class_proportions=proportions,
        informativeness=Informativeness(
            image=args.image_informativeness, clinical=args.clinical_informativeness
        ),
        seed=args.seed,
        image_side=args.image_side,
    )
    histogram = manifest.label_histogram()
    print(f"wrote {len(manifest)} samples to {args.out}: {histogram}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    artifacts = exp.run_experiment(config)
    _print_run_summary(artifacts)
    return 0 if any(c.completed for c in artifacts.cells) else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    config = dataclasses.replace(config, cf_values=tuple(args.cf_list))
    artifacts = exp.run_experiment(config)
    _print_run_summary(artifacts)
    return 0 if any(c.completed for c in artifacts.cells) else 1


def cmd_evaluate(args: argparse.Namespace) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    manifest = parse_manifest(args.manifest, args.root)
    fold_meta = meta["fold"]
    folds = make_folds(
        manifest, fold_meta["count"], fold_meta["seed"], fold_meta["group_by_patient"]
    )
    label_order = manifest.labels_present()
    pre = meta["preprocess"]
    dataset = LesionDataset(
        manifest, folds.members(fold_meta["index"]), label_order,
        side=pre["side"], mean=tuple(pre["mean"]), std=tuple(pre["std"]),
        age_scale=pre["age_scale"],
    )
    loader = torch.utils.data.DataLoader(dataset, batch_size=64)
    probs, trues = evaluate_model(model, loader, label_order)
    report = evaluate_probabilities(trues, probs, label_order)
    out = args.out or (Path(args.checkpoint).parent / "metrics_reeval.json")
    report.to_json(out)
    summary = "  ".join(f"{m}={report.metric(m):.4f}" for m in METRIC_ORDER)
    print(f"fold {fold_meta['index']}: {summary}")
    print(f"wrote {out}")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    matrix = ScoreMatrix.from_csv(args.scores)
    report = compare_models(
        matrix,
        alpha_friedman=args.alpha_friedman,
        alpha_wilcoxon=args.alpha_wilcoxon,
        holm=args.holm,
    )
    sys.stdout.write(report.render_text())
    if args.out:
        report.to_json(args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    artifacts = exp.load_run(args.run)
    written = exp.emit_reports(artifacts)
    _print_run_summary(artifacts)
    print(f"wrote {len(written)} report files under {artifacts.run_dir}")
    return 0


def _print_run_summary(artifacts: exp.RunArtifacts) -> None:
    failed = [c for c in artifacts.cells if c.error]
    print(f"run directory: {artifacts.run_dir}")
    sys.stdout.write(artifacts.aggregate.render_text())
    if artifacts.comparison is not None:
        sys.stdout.write(artifacts.comparison.render_text())
    for cell in failed:
        print(f"FAILED {cell.group}/fold{cell.fold}: {cell.error}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionfuse",
        description="Skin-lesion classification with image + clinical-metadata fusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="apply color constancy to a dataset")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--root", type=Path, required=True, help="image root directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--p", default="6", help="Minkowski norm order or 'infinity'")
    p.add_argument("--gamma", type=float, default=None, help="output gamma encoding")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-informativeness", type=float, default=0.6)
    p.add_argument("--clinical-informativeness", type=float, default=0.6)
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--proportions", help="JSON object label -> fraction")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the configured experiment grid")
    _add_common_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a combination-factor sweep")
    _add_common_experiment_flags(p)
    p.add_argument("--cf-list", type=float, nargs="+",
                   default=[0.5, 0.6, 0.7, 0.8, 0.9],
                   help="combination factors to sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="re-evaluate a checkpoint on its fold")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="compare treatments from a fold-score CSV")
    p.add_argument("--scores", type=Path, required=True,
                   help="CSV: header = treatment names, rows = blocks")
    p.add_argument("--alpha-friedman", type=float, default=0.05)
    p.add_argument("--alpha-wilcoxon", type=float, default=0.01)
    p.add_argument("--holm", action="store_true",
                   help="Holm-adjust the pairwise p-values")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="regenerate tables and plots for a run")
    p.add_argument("--run", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
