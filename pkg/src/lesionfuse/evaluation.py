"""Classification metrics: confusion matrices, BACC, weighted P/R/F1, AUC, ROC.

Conventions (fixed so cross-run comparisons stay apples-to-apples):
AUC is macro-averaged one-vs-rest with ties credited 0.5; classes with no
true samples are skipped with a warning.  Weighted precision treats a class
that was never predicted as precision 0.  Fold aggregation reports mean and
sample standard deviation (n - 1 denominator).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import DIAGNOSES

METRIC_ORDER = ("acc", "bacc", "precision_weighted", "recall_weighted",
                "f1_weighted", "auc")

METRIC_DISPLAY = {
    "acc": "ACC", "bacc": "BACC", "precision_weighted": "P",
    "recall_weighted": "R", "f1_weighted": "F1", "auc": "AUC",
}


def confusion_matrix(
    true_labels: Sequence, predicted_labels: Sequence, labels: Sequence = DIAGNOSES
) -> np.ndarray:
    """Count matrix with rows = true class, columns = predicted class."""
    if len(true_labels) != len(predicted_labels):
        raise ValueError("label sequences differ in length")
    index = {label: i for i, label in enumerate(labels)}
    matrix = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        if t not in index:
            raise ValueError(f"true label {t!r} outside the label set")
        if p not in index:
            raise ValueError(f"predicted label {p!r} outside the label set")
        matrix[index[t], index[p]] += 1
    return matrix


def accuracy(confusion: np.ndarray) -> float:
    confusion = np.asarray(confusion)
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(confusion) / total)


def balanced_accuracy(confusion: np.ndarray) -> float:
    """Mean per-class recall over classes that have true samples."""
    confusion = np.asarray(confusion, dtype=np.float64)
    support = confusion.sum(axis=1)
    present = support > 0
    if not present.any():
        raise ValueError("confusion matrix has no samples")
    recalls = np.diag(confusion)[present] / support[present]
    return float(recalls.mean())


def weighted_prf(confusion: np.ndarray) -> tuple[float, float, float]:
    """Support-weighted precision, recall and F1.

    A class with no predicted samples contributes precision 0; a class
    F1 is 0 when precision + recall is 0.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    diag = np.diag(confusion)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, diag / np.where(predicted > 0, predicted, 1), 0.0)
        recall = np.where(support > 0, diag / np.where(support > 0, support, 1), 0.0)
        pr_sum = precision + recall
        f1 = np.where(pr_sum > 0, 2 * precision * recall / np.where(pr_sum > 0, pr_sum, 1), 0.0)
    weights = support / total
    return (
        float((weights * precision).sum()),
        float((weights * recall).sum()),
        float((weights * f1).sum()),
    )


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based AUC of scores against a boolean positive mask, ties at 0.5."""
    n_pos = int(positive.sum())
    n_neg = int(len(positive) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("binary AUC needs both positives and negatives")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro_ovr(
    probabilities: np.ndarray, true_labels: Sequence, labels: Sequence = DIAGNOSES
) -> float:
    """Macro one-vs-rest AUC over classes present in the true labels."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    true_labels = list(true_labels)
    if probabilities.shape[0] != len(true_labels):
        raise ValueError("probabilities and labels differ in length")
    per_class = []
    for i, label in enumerate(labels):
        positive = np.array([t == label for t in true_labels])
        if positive.all() and len(labels) == 1:
            break
        if not positive.any():
            warnings.warn(f"class {label} has no true samples; skipped in AUC")
            continue
        if positive.all():
            warnings.warn(f"class {label} has no negatives; skipped in AUC")
            continue
        per_class.append(_binary_auc(probabilities[:, i], positive))
    if not per_class:
        raise ValueError("AUC undefined: need at least two classes present")
    return float(np.mean(per_class))


def roc_points(scores: np.ndarray, positive: np.ndarray) -> list[tuple[float, float]]:
    """(FPR, TPR) points from (0, 0) to (1, 1), one per score threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = int(len(positive) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positives and negatives")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tps = np.cumsum(positive[order])
    fps = np.cumsum(~positive[order])
    # keep only the last index of each tied score run (threshold boundaries)
    boundary = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    points = [(0.0, 0.0)]
    points += [(float(f / n_neg), float(t / n_pos))
               for f, t in zip(fps[boundary], tps[boundary])]
    return points


@dataclass
class MetricsReport:
    """Per-evaluation metrics bundle, JSON-serializable for plot regeneration."""

    labels: tuple[str, ...]
    acc: float
    bacc: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    auc: float
    confusion: list[list[int]]
    roc: dict[str, list[tuple[float, float]]]
    prob_dists: dict[str, list[float]]
    n_samples: int

    def metric(self, name: str) -> float:
        return float(getattr(self, name))

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            **{name: self.metric(name) for name in METRIC_ORDER},
            "confusion": self.confusion,
            "roc": {k: [list(p) for p in v] for k, v in self.roc.items()},
            "prob_dists": self.prob_dists,
            "n_samples": self.n_samples,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            labels=tuple(d["labels"]),
            acc=d["acc"], bacc=d["bacc"],
            precision_weighted=d["precision_weighted"],
            recall_weighted=d["recall_weighted"],
            f1_weighted=d["f1_weighted"], auc=d["auc"],
            confusion=[list(map(int, row)) for row in d["confusion"]],
            roc={k: [tuple(p) for p in v] for k, v in d["roc"].items()},
            prob_dists={k: list(map(float, v)) for k, v in d["prob_dists"].items()},
            n_samples=int(d["n_samples"]),
        )

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate_probabilities(
    true_labels: Sequence,
    probabilities: np.ndarray,
    labels: Sequence[str] = DIAGNOSES,
) -> MetricsReport:
    """Full metrics bundle from predicted class probabilities."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = tuple(labels)
    true_labels = list(true_labels)
    predicted = [labels[i] for i in probabilities.argmax(axis=1)]
    conf = confusion_matrix(true_labels, predicted, labels)
    precision, recall, f1 = weighted_prf(conf)
    roc: dict[str, list[tuple[float, float]]] = {}
    prob_dists: dict[str, list[float]] = {}
    for i, label in enumerate(labels):
        positive = np.array([t == label for t in true_labels])
        if positive.any() and not positive.all():
            roc[label] = roc_points(probabilities[:, i], positive)
        if positive.any():
            prob_dists[label] = probabilities[positive].mean(axis=0).tolist()
    return MetricsReport(
        labels=labels,
        acc=accuracy(conf),
        bacc=balanced_accuracy(conf),
        precision_weighted=precision,
        recall_weighted=recall,
        f1_weighted=f1,
        auc=auc_macro_ovr(probabilities, true_labels, labels),
        confusion=conf.tolist(),
        roc=roc,
        prob_dists=prob_dists,
        n_samples=len(true_labels),
    )


@dataclass(frozen=True)
class AggregateRow:
    """Mean +/- sample std of each metric for one experiment cell."""

    name: str
    n_folds: int
    means: dict[str, float]
    stds: dict[str, float]

    def format_cell(self, metric: str) -> str:
        return f"{self.means[metric]:.3f} ± {self.stds[metric]:.3f}"


@dataclass
class AggregateTable:
    rows: list[AggregateRow] = field(default_factory=list)

    def render_text(self) -> str:
        headers = ["cell"] + [METRIC_DISPLAY[m] for m in METRIC_ORDER]
        body = [[row.name] + [row.format_cell(m) for m in METRIC_ORDER]
                for row in self.rows]
        widths = [max(len(str(r[i])) for r in [headers] + body) for i in range(len(headers))]
        def fmt(cells):
            return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
        return "\n".join([fmt(headers)] + [fmt(r) for r in body]) + "\n"

    def to_csv(self, path) -> Path:
        path = Path(path)
        lines = ["cell,n_folds," + ",".join(
            f"{m}_mean,{m}_std" for m in METRIC_ORDER)]
        for row in self.rows:
            cells = [row.name, str(row.n_folds)]
            for m in METRIC_ORDER:
                cells += [f"{row.means[m]:.6f}", f"{row.stds[m]:.6f}"]
            lines.append(",".join(cells))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def aggregate_folds(reports: Sequence[MetricsReport], name: str = "cell") -> AggregateRow:
    """Mean and sample standard deviation of each metric across fold reports."""
    if len(reports) < 2:
        raise ValueError("aggregation needs at least two fold reports")
    label_sets = {r.labels for r in reports}
    if len(label_sets) != 1:
        raise ValueError("fold reports disagree on the class set")
    means, stds = {}, {}
    for metric in METRIC_ORDER:
        values = np.array([r.metric(metric) for r in reports], dtype=np.float64)
        means[metric] = float(values.mean())
        stds[metric] = float(values.std(ddof=1))
    return AggregateRow(name=name, n_folds=len(reports), means=means, stds=stds)
