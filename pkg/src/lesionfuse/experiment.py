"""End-to-end experiment runner: train cells, persist artifacts, emit reports.

A run is a grid of cells (backbone x scenario x combination factor x fold)
sharing one fold assignment.  Each cell trains a fresh model, evaluates its
validation fold, and persists a checkpoint, the per-epoch history CSV and a
metrics JSON under

    <out>/<timestamp>-<confhash>/<backbone>/<scenario>/cf<value>/fold<k>/

Aggregation and the model-comparison test run after all cells.  Reports are
regenerable from the persisted metrics files alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .backbones import FEATURE_DIMS, create_extractor
from .data import DatasetManifest, FoldAssignment, make_folds, parse_manifest
from .evaluation import (
    METRIC_ORDER,
    AggregateTable,
    MetricsReport,
    aggregate_folds,
    evaluate_probabilities,
)
from .fusion import FusedClassifier, FusionConfig, FusionHead, build_head
from .preprocess import IMAGENET_MEAN, IMAGENET_STD, AugmentPolicy, ColorConstancyConfig
from .stats import ComparisonReport, ScoreMatrix, compare_models
from .trainer import (
    LesionDataset,
    TrainConfig,
    evaluate_model,
    save_checkpoint,
    train_two_phase,
)

VGG_INTERMEDIATE = 1024


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run; round-trips through YAML."""

    manifest: str
    out_dir: str = "runs"
    backbones: tuple[str, ...] = ("tiny",)
    scenarios: tuple[str, ...] = ("image_only", "fused")
    cf_values: tuple[float, ...] = (0.8,)
    folds: int = 5
    seed: int = 0
    group_by_patient: bool = True
    pretrained: bool = False
    input_side: int = 224
    age_scale: float = 100.0
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    dropout: float = 0.5
    comparison_metric: str = "bacc"
    alpha_friedman: float = 0.05
    alpha_wilcoxon: float = 0.01
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: Optional[AugmentPolicy] = field(default_factory=AugmentPolicy)
    color_constancy: Optional[ColorConstancyConfig] = None

    def __post_init__(self) -> None:
        self.backbones = tuple(self.backbones)
        self.scenarios = tuple(self.scenarios)
        self.cf_values = tuple(float(v) for v in self.cf_values)
        for name in self.backbones:
            if name not in FEATURE_DIMS:
                raise ValueError(f"unknown backbone {name!r}")
        for scenario in self.scenarios:
            if scenario not in ("image_only", "fused"):
                raise ValueError(f"unknown scenario {scenario!r}")
        for cf in self.cf_values:
            if not 0.0 <= cf < 1.0:
                raise ValueError(f"combination factor {cf} outside [0, 1)")
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if self.comparison_metric not in METRIC_ORDER:
            raise ValueError(f"comparison_metric must be one of {METRIC_ORDER}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = dataclasses.asdict(self.train)
        d["augment"] = None if self.augment is None else dataclasses.asdict(self.augment)
        d["color_constancy"] = (None if self.color_constancy is None
                                else dataclasses.asdict(self.color_constancy))
        return d

    def to_yaml(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if isinstance(d.get("train"), dict):
            d["train"] = TrainConfig(**d["train"])
        if isinstance(d.get("augment"), dict):
            aug = dict(d["augment"])
            for key in ("scale_range", "blur_radius_range"):
                if key in aug and aug[key] is not None:
                    aug[key] = tuple(aug[key])
            d["augment"] = AugmentPolicy(**aug)
        if isinstance(d.get("color_constancy"), dict):
            d["color_constancy"] = ColorConstancyConfig(**d["color_constancy"])
        for key in ("mean", "std"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:8]


@dataclass
class CellResult:
    backbone: str
    scenario: str
    c_f: float
    fold: int
    directory: Path
    report: Optional[MetricsReport] = None
    error: Optional[str] = None

    @property
    def group(self) -> str:
        return f"{self.backbone}/{self.scenario}/cf{self.c_f:g}"

    @property
    def completed(self) -> bool:
        return self.report is not None


@dataclass
class RunArtifacts:
    run_dir: Path
    config: ExperimentConfig
    cells: list[CellResult]
    aggregate: AggregateTable
    comparison: Optional[ComparisonReport] = None
    folds: Optional[FoldAssignment] = None


def _atomic_write(path: Path, data: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell_seed(base: int, coords: Sequence[int]) -> int:
    ss = np.random.SeedSequence([base & 0xFFFFFFFF, *coords])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**31))


def _build_model(
    config: ExperimentConfig, backbone: str, scenario: str, c_f: float, n_classes: int
):
    extractor = create_extractor(backbone, pretrained=config.pretrained)
    fusion_cfg = FusionConfig(
        c_f=c_f,
        backbone_dim=extractor.spec.feature_dim,
        scenario=scenario,
        dropout=config.dropout,
        vgg_intermediate=VGG_INTERMEDIATE if backbone.startswith("vgg") else None,
        n_classes=n_classes,
    )
    head_spec = build_head(fusion_cfg)
    return FusedClassifier(extractor, FusionHead(head_spec))


def run_experiment(config: ExperimentConfig, run_dir: Optional[Path] = None) -> RunArtifacts:
    """Train and evaluate every configured cell; persist all artifacts.

    A failing cell is recorded with its diagnostic and the run continues;
    configuration errors abort before any training starts.
    """
    manifest = parse_manifest(
        Path(config.manifest), Path(config.manifest).parent, check_images=True
    )
    folds = make_folds(manifest, config.folds, config.seed, config.group_by_patient)

    if run_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(config.out_dir) / f"{stamp}-{config.config_hash()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    config.to_yaml(run_dir / "config.yaml")

    cells: list[CellResult] = []
    for bi, backbone in enumerate(config.backbones):
        for si, scenario in enumerate(config.scenarios):
            for ci, c_f in enumerate(config.cf_values):
                for fold in range(config.folds):
                    cell_dir = (run_dir / backbone / scenario / f"cf{c_f:g}"
                                / f"fold{fold}")
                    cell_dir.mkdir(parents=True, exist_ok=True)
                    cell = CellResult(backbone, scenario, c_f, fold, cell_dir)
                    cells.append(cell)
                    try:
                        _run_cell(config, manifest, folds, cell,
                                  seed=_cell_seed(config.seed, (bi, si, ci, fold)))
                    except Exception as exc:
                        cell.error = f"{type(exc).__name__}: {exc}"
                        _atomic_write(cell_dir / "FAILED.txt", cell.error + "\n")
    artifacts = RunArtifacts(
        run_dir=run_dir, config=config, cells=cells,
        aggregate=AggregateTable(), folds=folds,
    )
    _aggregate(artifacts)
    emit_reports(artifacts)
    return artifacts


def _run_cell(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    folds: FoldAssignment,
    cell: CellResult,
    seed: int,
) -> None:
    torch.manual_seed(seed)
    model = _build_model(config, cell.backbone, cell.scenario, cell.c_f,
                         n_classes=len(manifest.labels_present()))
    train_cfg = dataclasses.replace(config.train, seed=seed)
    model, history = train_two_phase(
        model, manifest, folds, cell.fold, train_cfg,
        side=config.input_side, mean=config.mean, std=config.std,
        age_scale=config.age_scale, augment_policy=config.augment,
        color_constancy=config.color_constancy,
    )
    label_order = manifest.labels_present()
    val_set = LesionDataset(
        manifest, folds.members(cell.fold), label_order,
        side=config.input_side, mean=config.mean, std=config.std,
        age_scale=config.age_scale, color_constancy=config.color_constancy,
    )
    loader = torch.utils.data.DataLoader(val_set, batch_size=train_cfg.batch_size)
    probs, trues = evaluate_model(model, loader, label_order)
    cell.report = evaluate_probabilities(trues, probs, label_order)

    history.to_csv(cell.directory / "history.csv")
    cell.report.to_json(cell.directory / "metrics.json")
    save_checkpoint(
        cell.directory / "checkpoint.pt", model,
        backbone=cell.backbone, train_config=train_cfg,
        fold_index=cell.fold, fold_count=folds.k, fold_seed=config.seed,
        group_by_patient=config.group_by_patient, c_f=cell.c_f,
        side=config.input_side, mean=config.mean, std=config.std,
        age_scale=config.age_scale,
    )


def _aggregate(artifacts: RunArtifacts) -> None:
    groups: dict[str, list[CellResult]] = {}
    for cell in artifacts.cells:
        groups.setdefault(cell.group, []).append(cell)

    table = AggregateTable()
    for name, group_cells in groups.items():
        reports = [c.report for c in group_cells if c.completed]
        if len(reports) >= 2:
            table.rows.append(aggregate_folds(reports, name=name))
    artifacts.aggregate = table

    complete_groups = {
        name: {c.fold: c for c in group_cells if c.completed}
        for name, group_cells in groups.items()
    }
    complete_groups = {name: v for name, v in complete_groups.items() if v}
    common_folds = None
    for by_fold in complete_groups.values():
        folds_here = set(by_fold)
        common_folds = folds_here if common_folds is None else common_folds & folds_here
    if len(complete_groups) >= 2 and common_folds and len(common_folds) >= 2:
        fold_list = sorted(common_folds)
        names = list(complete_groups)
        metric = artifacts.config.comparison_metric
        scores = np.array([
            [complete_groups[name][f].report.metric(metric) for name in names]
            for f in fold_list
        ])
        matrix = ScoreMatrix(
            scores=scores, treatments=tuple(names),
            blocks=tuple(f"fold{f}" for f in fold_list),
        )
        artifacts.comparison = compare_models(
            matrix, artifacts.config.alpha_friedman, artifacts.config.alpha_wilcoxon
        )


def load_run(run_dir) -> RunArtifacts:
    """Rebuild RunArtifacts from a run directory's persisted files."""
    run_dir = Path(run_dir)
    config = ExperimentConfig.from_yaml(run_dir / "config.yaml")
    cells: list[CellResult] = []
    failed_dirs = {p.parent for p in run_dir.glob("*/*/cf*/fold*/FAILED.txt")}
    for metrics_path in sorted(run_dir.glob("*/*/cf*/fold*/metrics.json")):
        cell_dir = metrics_path.parent
        if cell_dir in failed_dirs:
            continue
        fold = int(cell_dir.name.removeprefix("fold"))
        c_f = float(cell_dir.parent.name.removeprefix("cf"))
        scenario = cell_dir.parent.parent.name
        backbone = cell_dir.parent.parent.parent.name
        cells.append(CellResult(
            backbone, scenario, c_f, fold, cell_dir,
            report=MetricsReport.from_json(metrics_path),
        ))
    for cell_dir in sorted(failed_dirs):
        fold = int(cell_dir.name.removeprefix("fold"))
        c_f = float(cell_dir.parent.name.removeprefix("cf"))
        cells.append(CellResult(
            cell_dir.parent.parent.parent.name, cell_dir.parent.parent.name,
            c_f, fold, cell_dir,
            error=(cell_dir / "FAILED.txt").read_text(encoding="utf-8").strip(),
        ))
    artifacts = RunArtifacts(
        run_dir=run_dir, config=config, cells=cells, aggregate=AggregateTable(),
    )
    _aggregate(artifacts)
    return artifacts


def emit_reports(artifacts: RunArtifacts | Path | str) -> list[Path]:
    """Write tables, plots and the comparison report for a run.

    Idempotent: emitted tables are byte-identical across reruns over the
    same artifacts (no timestamps in content).
    """
    if not isinstance(artifacts, RunArtifacts):
        artifacts = load_run(artifacts)
    completed = [c for c in artifacts.cells if c.completed]
    if not completed:
        raise ValueError("no completed cells to report")
    written: list[Path] = []

    run_dir = artifacts.run_dir
    _atomic_write(run_dir / "aggregate.txt", artifacts.aggregate.render_text())
    written.append(run_dir / "aggregate.txt")
    artifacts.aggregate.to_csv(run_dir / "aggregate.csv")
    written.append(run_dir / "aggregate.csv")

    if artifacts.comparison is not None:
        artifacts.comparison.to_json(run_dir / "comparison.json")
        _atomic_write(run_dir / "comparison.txt", artifacts.comparison.render_text())
        written += [run_dir / "comparison.json", run_dir / "comparison.txt"]

    for cell in completed:
        written += _plot_cell(cell)
    return written


def _plot_cell(cell: CellResult) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = cell.report
    labels = report.labels
    out: list[Path] = []

    fig, ax = plt.subplots(figsize=(4.5, 4))
    conf = np.asarray(report.confusion)
    ax.imshow(conf, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels, rotation=45)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(labels)):
        for j in range(len(labels)):
            ax.text(j, i, str(conf[i, j]), ha="center", va="center", fontsize=8)
    ax.set_title(cell.group + f" fold{cell.fold}")
    fig.tight_layout()
    path = cell.directory / "confusion.png"
    fig.savefig(path)
    plt.close(fig)
    out.append(path)

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label, points in report.roc.items():
        xs, ys = zip(*points)
        ax.plot(xs, ys, label=label)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=7)
    ax.set_title(f"ROC {cell.group} fold{cell.fold}")
    fig.tight_layout()
    path = cell.directory / "roc.png"
    fig.savefig(path)
    plt.close(fig)
    out.append(path)

    present = [label for label in labels if label in report.prob_dists]
    fig, axes = plt.subplots(1, max(len(present), 1), figsize=(2.2 * max(len(present), 1), 2.6))
    axes = np.atleast_1d(axes)
    for ax, label in zip(axes, present):
        ax.bar(range(len(labels)), report.prob_dists[label])
        ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=6)
        ax.set_ylim(0, 1)
        ax.set_title(f"true {label}", fontsize=8)
    fig.suptitle(f"mean predicted probability by true class, {cell.group}", fontsize=8)
    fig.tight_layout()
    path = cell.directory / "prob_dist.png"
    fig.savefig(path)
    plt.close(fig)
    out.append(path)
    return out
