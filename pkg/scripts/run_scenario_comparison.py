#!/usr/bin/env python3
"""Fused vs image-only study on a synthetic dataset, CPU scale.

Generates a dataset with controllable signal strength per source, trains
the tiny backbone under both scenarios across several seeds, and runs the
Friedman + Wilcoxon comparison over the per-fold balanced accuracies.
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np

from lesionfuse.experiment import ExperimentConfig, run_experiment
from lesionfuse.preprocess import AugmentPolicy
from lesionfuse.stats import ScoreMatrix, compare_models
from lesionfuse.synth import Informativeness, generate_synthetic
from lesionfuse.trainer import TrainConfig


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/scenario_comparison"))
    parser.add_argument("--size", type=int, default=600)
    parser.add_argument("--image-informativeness", type=float, default=0.6)
    parser.add_argument("--clinical-informativeness", type=float, default=0.6)
    parser.add_argument("--cf", type=float, default=0.8)
    parser.add_argument("--folds", type=int, default=5)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--data-seed", type=int, default=1234)
    parser.add_argument("--backbone", default="tiny")
    parser.add_argument("--side", type=int, default=16)
    parser.add_argument("--epochs", type=int, nargs=2, default=(8, 6),
                        metavar=("PHASE1", "PHASE2"))
    parser.add_argument("--augment", action="store_true",
                        help="enable training-time augmentation")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    data_dir = args.out / "data"
    if not (data_dir / "manifest.csv").exists():
        generate_synthetic(
            data_dir, args.size,
            informativeness=Informativeness(
                image=args.image_informativeness,
                clinical=args.clinical_informativeness,
            ),
            seed=args.data_seed,
        )
        print(f"generated {args.size} samples under {data_dir}")

    image_only, fused = [], []
    for seed in args.seeds:
        started = time.time()
        config = ExperimentConfig(
            manifest=str(data_dir / "manifest.csv"),
            out_dir=str(args.out / f"seed{seed}"),
            backbones=(args.backbone,),
            scenarios=("image_only", "fused"),
            cf_values=(args.cf,),
            folds=args.folds,
            seed=seed,
            input_side=args.side,
            train=TrainConfig(
                phase1_epochs=args.epochs[0], phase2_epochs=args.epochs[1],
                lr_phase1=3e-3, lr_phase2=5e-4, plateau_patience=3,
                early_stop_patience=5, batch_size=32,
            ),
            augment=AugmentPolicy() if args.augment else AugmentPolicy.disabled(),
        )
        artifacts = run_experiment(config)
        by_scenario: dict[str, dict[int, float]] = {}
        for cell in artifacts.cells:
            assert cell.completed, cell.error
            by_scenario.setdefault(cell.scenario, {})[cell.fold] = cell.report.bacc
        for fold in sorted(by_scenario["image_only"]):
            image_only.append(by_scenario["image_only"][fold])
            fused.append(by_scenario["fused"][fold])
        print(f"seed {seed}: image_only {np.mean(list(by_scenario['image_only'].values())):.3f}  "
              f"fused {np.mean(list(by_scenario['fused'].values())):.3f}  "
              f"[{time.time() - started:.0f}s]")

    image_only = np.array(image_only)
    fused = np.array(fused)
    print(f"\nmean BACC: image_only {image_only.mean():.3f} +/- {image_only.std(ddof=1):.3f}  "
          f"fused {fused.mean():.3f} +/- {fused.std(ddof=1):.3f}")
    print(f"margin {fused.mean() - image_only.mean():+.3f} over {len(fused)} fold-pairs")

    matrix = ScoreMatrix(np.stack([image_only, fused], axis=1),
                         ("image_only", "fused"))
    print(compare_models(matrix, alpha_friedman=0.05, alpha_wilcoxon=0.05).render_text())


if __name__ == "__main__":
    main()
