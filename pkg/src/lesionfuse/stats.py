"""Nonparametric model comparison: Friedman omnibus + pairwise Wilcoxon.

Scores are arranged as blocks x treatments (here: folds x model
configurations).  The Friedman test ranks treatments within each block and
tests the chi-square approximation of the rank statistic; if it rejects,
all treatment pairs are compared with the Wilcoxon signed-rank test.  No
multiple-comparison correction is applied by default; a Holm-adjusted mode
is available behind a flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2, norm, rankdata


@dataclass(frozen=True)
class ScoreMatrix:
    """Blocks x treatments score table with labels."""

    scores: np.ndarray
    treatments: tuple[str, ...]
    blocks: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if scores.ndim != 2:
            raise ValueError("scores must be a 2-D blocks x treatments array")
        n, k = scores.shape
        if k < 2:
            raise ValueError("need at least two treatments")
        if n < 2:
            raise ValueError("need at least two blocks")
        if not np.isfinite(scores).all():
            raise ValueError("scores contain missing or non-finite cells")
        if len(self.treatments) != k:
            raise ValueError("treatment labels do not match the column count")
        if not self.blocks:
            object.__setattr__(self, "blocks",
                               tuple(f"block{i}" for i in range(n)))
        elif len(self.blocks) != n:
            raise ValueError("block labels do not match the row count")

    @classmethod
    def from_csv(cls, path) -> "ScoreMatrix":
        """Read a fold-score CSV: header = treatment names, rows = blocks."""
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if len(lines) < 3:
            raise ValueError("score CSV needs a header and at least two block rows")
        treatments = tuple(t.strip() for t in lines[0].split(","))
        rows = []
        for i, line in enumerate(lines[1:], start=2):
            cells = line.split(",")
            if len(cells) != len(treatments):
                raise ValueError(f"row {i}: expected {len(treatments)} cells")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise ValueError(f"row {i}: non-numeric score") from None
        return cls(scores=np.array(rows), treatments=treatments)

    def to_csv(self, path) -> Path:
        path = Path(path)
        lines = [",".join(self.treatments)]
        lines += [",".join(f"{v:.10g}" for v in row) for row in self.scores]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def _as_scores(m: ScoreMatrix | np.ndarray) -> np.ndarray:
    if isinstance(m, ScoreMatrix):
        return m.scores
    scores = np.asarray(m, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("need a 2-D array with at least two treatments")
    if scores.shape[0] < 2:
        raise ValueError("need at least two blocks")
    return scores


def friedman_test(m: ScoreMatrix | np.ndarray) -> tuple[float, float]:
    """Friedman rank test over blocks x treatments.

    Treatments are average-ranked within each block; the statistic

        chi2_F = 12 n / (k (k+1)) * sum_j (Rbar_j - (k+1)/2)^2

    is divided by the standard tie correction
    1 - sum(t^3 - t) / (n k (k^2 - 1)) and referred to the chi-square
    distribution with k - 1 degrees of freedom.  Fully tied data yield
    statistic 0 and p = 1.
    """
    scores = _as_scores(m)
    n, k = scores.shape
    ranks = rankdata(scores, axis=1)
    rbar = ranks.mean(axis=0)

    tie_sum = 0.0
    for row in scores:
        _, counts = np.unique(row, return_counts=True)
        tie_sum += float((counts**3 - counts).sum())
    correction = 1.0 - tie_sum / (n * k * (k**2 - 1))
    if correction <= 0.0:
        return 0.0, 1.0

    statistic = 12.0 * n / (k * (k + 1)) * float(((rbar - (k + 1) / 2.0) ** 2).sum())
    statistic /= correction
    p_value = float(chi2.sf(statistic, df=k - 1))
    return float(statistic), p_value


def _signed_rank_parts(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("samples must be 1-D and of equal length")
    diff = a - b
    diff = diff[diff != 0.0]
    if diff.size == 0:
        raise ValueError("no information: all differences are zero")
    ranks = rankdata(np.abs(diff))
    return diff, ranks


def _exact_null_pmf(doubled_ranks: np.ndarray) -> np.ndarray:
    """PMF of the doubled positive-rank sum under random signs."""
    total = int(doubled_ranks.sum())
    pmf = np.zeros(total + 1, dtype=np.float64)
    pmf[0] = 1.0
    for r in doubled_ranks:
        nxt = pmf * 0.5
        nxt[r:] += pmf[: total + 1 - r] * 0.5
        pmf = nxt
    return pmf


EXACT_LIMIT = 20


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], method: str = "auto"
) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test for paired samples.

    Zero differences are dropped; ties in |a - b| receive average ranks.
    The statistic is W = min(W+, W-).  Up to 20 non-zero differences the
    p-value comes from the exact sign-enumeration null distribution;
    beyond that a normal approximation with tie and continuity corrections
    is used ("auto"; force a branch with "exact" or "approx").
    """
    if method not in ("auto", "exact", "approx"):
        raise ValueError("method must be 'auto', 'exact' or 'approx'")
    diff, ranks = _signed_rank_parts(np.asarray(a), np.asarray(b))
    n = diff.size
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks.sum() - w_plus)
    statistic = min(w_plus, w_minus)

    if method == "exact" or (method == "auto" and n <= EXACT_LIMIT):
        doubled = np.rint(2.0 * ranks).astype(int)
        pmf = _exact_null_pmf(doubled)
        doubled_obs = int(round(2.0 * w_plus))
        p_le = float(pmf[: doubled_obs + 1].sum())
        p_ge = float(pmf[doubled_obs:].sum())
        p_value = min(1.0, 2.0 * min(p_le, p_ge))
    else:
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(np.abs(diff), return_counts=True)
        tie_term = float((counts**3 - counts).sum()) / 48.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        z = (statistic - mean + 0.5) / np.sqrt(var)
        p_value = min(1.0, 2.0 * float(norm.cdf(z)))
    return statistic, p_value


@dataclass(frozen=True)
class PairwiseResult:
    treatment_a: str
    treatment_b: str
    statistic: float
    p_value: float
    p_adjusted: Optional[float]
    significant: bool


@dataclass
class ComparisonReport:
    """Friedman verdict plus the pairwise section when the omnibus rejects."""

    treatments: tuple[str, ...]
    friedman_statistic: float
    friedman_p: float
    alpha_friedman: float
    alpha_wilcoxon: float
    holm: bool
    pairwise: Optional[list[PairwiseResult]] = None

    @property
    def friedman_significant(self) -> bool:
        return self.friedman_p < self.alpha_friedman

    def to_dict(self) -> dict:
        return {
            "treatments": list(self.treatments),
            "friedman": {
                "statistic": self.friedman_statistic,
                "p_value": self.friedman_p,
                "alpha": self.alpha_friedman,
                "significant": self.friedman_significant,
            },
            "wilcoxon": None if self.pairwise is None else {
                "alpha": self.alpha_wilcoxon,
                "holm": self.holm,
                "pairs": [
                    {
                        "a": p.treatment_a, "b": p.treatment_b,
                        "statistic": p.statistic, "p_value": p.p_value,
                        "p_adjusted": p.p_adjusted, "significant": p.significant,
                    }
                    for p in self.pairwise
                ],
            },
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    def render_text(self) -> str:
        lines = [
            f"Friedman: statistic={self.friedman_statistic:.6g} "
            f"p={self.friedman_p:.6g} alpha={self.alpha_friedman:g} -> "
            + ("significant" if self.friedman_significant else "not significant")
        ]
        if self.pairwise is None:
            lines.append("pairwise comparisons not run")
        else:
            lines.append(f"pairwise Wilcoxon (alpha={self.alpha_wilcoxon:g}"
                         + (", Holm-adjusted)" if self.holm else ")"))
            for p in self.pairwise:
                shown = p.p_adjusted if p.p_adjusted is not None else p.p_value
                verdict = "different" if p.significant else "indistinguishable"
                lines.append(
                    f"  {p.treatment_a} vs {p.treatment_b}: W={p.statistic:g} "
                    f"p={shown:.6g} -> {verdict}"
                )
        return "\n".join(lines) + "\n"


def _holm_adjust(p_values: list[float]) -> list[float]:
    m = len(p_values)
    order = np.argsort(p_values)
    adjusted = [0.0] * m
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p_values[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


def compare_models(
    per_model_fold_scores: ScoreMatrix,
    alpha_friedman: float = 0.05,
    alpha_wilcoxon: float = 0.01,
    holm: bool = False,
) -> ComparisonReport:
    """Omnibus Friedman test, then all pairwise Wilcoxon tests if it rejects."""
    matrix = per_model_fold_scores
    statistic, p_value = friedman_test(matrix)
    report = ComparisonReport(
        treatments=tuple(matrix.treatments),
        friedman_statistic=statistic,
        friedman_p=p_value,
        alpha_friedman=alpha_friedman,
        alpha_wilcoxon=alpha_wilcoxon,
        holm=holm,
    )
    if not report.friedman_significant:
        return report

    pairs = [
        (i, j)
        for i in range(len(matrix.treatments))
        for j in range(i + 1, len(matrix.treatments))
    ]
    raw = [
        wilcoxon_signed_rank(matrix.scores[:, i], matrix.scores[:, j])
        for i, j in pairs
    ]
    adjusted = _holm_adjust([p for _, p in raw]) if holm else [None] * len(raw)
    report.pairwise = [
        PairwiseResult(
            treatment_a=matrix.treatments[i],
            treatment_b=matrix.treatments[j],
            statistic=stat,
            p_value=p,
            p_adjusted=adj,
            significant=(adj if adj is not None else p) < alpha_wilcoxon,
        )
        for (i, j), (stat, p), adj in zip(pairs, raw, adjusted)
    ]
    return report
