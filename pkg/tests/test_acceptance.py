"""Acceptance suite: one test per release criterion, at pinned tolerances.

Each test prints a single PASS line (bypassing capture) once its criterion
holds; a failing criterion shows up as the test's FAILED line.  The heavy
scenario study behind criteria 9 and 10 runs once per session and is
reused by both.
"""

import itertools
import math
import sys
import time

import mpmath
import numpy as np
import pytest
import torch

from lesionfuse.backbones import create_extractor
from lesionfuse.data import (
    BOOL_FIELDS,
    DIAGNOSES,
    REGIONS,
    class_weights,
    encode_clinical,
    make_folds,
)
from lesionfuse.evaluation import auc_macro_ovr, balanced_accuracy, weighted_prf
from lesionfuse.experiment import ExperimentConfig, run_experiment
from lesionfuse.fusion import (
    FusedClassifier,
    FusionConfig,
    FusionHead,
    build_head,
    reduced_image_features,
    total_features,
)
from lesionfuse.preprocess import AugmentPolicy, ColorConstancyConfig, shades_of_gray
from lesionfuse.stats import (
    ScoreMatrix,
    compare_models,
    friedman_test,
    wilcoxon_signed_rank,
)
from lesionfuse.synth import Informativeness, generate_synthetic
from lesionfuse.trainer import TrainConfig, train_two_phase, weighted_cross_entropy

from conftest import make_manifest, make_record


def report_pass(criterion: int, detail: str) -> None:
    sys.__stdout__.write(f"[acceptance] criterion {criterion:02d}: PASS ({detail})\n")
    sys.__stdout__.flush()


REFERENCE_COUNTS = {"ACK": 543, "BCC": 442, "MEL": 67, "NEV": 196, "SCC": 149, "SEK": 215}


# ------------------------------------------------------------ criterion 1

def test_criterion_01_fusion_arithmetic():
    start = time.time()
    expected = {0.5: (28, 56), 0.6: (42, 70), 0.7: (66, 94),
                0.8: (112, 140), 0.9: (252, 280)}
    for c_f, (n_img, total) in expected.items():
        assert reduced_image_features(28, c_f) == n_img
        assert total_features(28, c_f) == total
    elapsed = time.time() - start
    assert elapsed < 1.0
    report_pass(1, f"5 factor widths exact, {elapsed:.3f}s")


# ------------------------------------------------------------ criterion 2

def test_criterion_02_encoding_slots():
    start = time.time()
    rng = np.random.default_rng(2024)
    for i in range(10_000):
        record = make_record(
            lesion_id=f"r{i}",
            age=int(rng.integers(0, 120)),
            region=REGIONS[rng.integers(len(REGIONS))],
            diagnosis=DIAGNOSES[rng.integers(len(DIAGNOSES))],
            **{name: bool(rng.integers(2)) for name in BOOL_FIELDS},
        )
        vec = encode_clinical(record)
        assert vec.shape == (28,)
        assert vec[1:].sum() == 7.0
    elapsed = time.time() - start
    assert elapsed < 5.0
    report_pass(2, f"10000 encodings, 28 slots, slot-sum 7 exact, {elapsed:.1f}s")


# ------------------------------------------------------------ criterion 3

def test_criterion_03_class_weights():
    start = time.time()
    records = [
        make_record(lesion_id=f"l{label}{i}", diagnosis=label)
        for label, count in REFERENCE_COUNTS.items()
        for i in range(count)
    ]
    weights = class_weights(make_manifest(records))
    for label, count in REFERENCE_COUNTS.items():
        assert abs(weights.w[label] - 1612 / count) / (1612 / count) < 1e-12
    assert weights.w["ACK"] == pytest.approx(2.9687, abs=5e-5)
    assert weights.w["MEL"] == pytest.approx(24.0597, abs=5e-5)
    elapsed = time.time() - start
    assert elapsed < 1.0
    report_pass(3, f"N/n_i exact on 1612-sample manifest, {elapsed:.2f}s")


# ------------------------------------------------------------ criterion 4

def test_criterion_04_color_constancy():
    start = time.time()
    rng = np.random.default_rng(4)

    # (a) p = 1 equals the closed-form gray-world correction
    image = rng.uniform(0.05, 0.6, size=(64, 64, 3))
    means = image.mean(axis=(0, 1))
    oracle = np.clip(image * (means.mean() / means), 0, 1)
    ours = shades_of_gray(image, ColorConstancyConfig(p=1))
    assert np.abs(ours - oracle).max() < 1e-6

    # (b) idempotence when nothing clips
    image = rng.uniform(0.1, 0.5, size=(64, 64, 3))
    once = shades_of_gray(image, ColorConstancyConfig(p=6))
    assert once.max() < 1.0, "construction must avoid clipping"
    twice = shades_of_gray(once, ColorConstancyConfig(p=6))
    assert np.abs(twice - once).max() < 1e-5

    # (c) synthetic channel gains recovered up to a global scalar
    base = rng.uniform(0.05, 0.4, size=(64, 64, 3))
    base *= base.mean() / base.mean(axis=(0, 1))
    gained = base * np.array([2.0, 1.0, 1.0])
    corrected = shades_of_gray(gained, ColorConstancyConfig(p=1))
    scale = corrected.mean() / base.mean()
    assert np.abs(corrected - base * scale).max() < 1e-5

    elapsed = time.time() - start
    assert elapsed < 10.0
    report_pass(4, f"gray-world oracle, idempotence, gain recovery, {elapsed:.2f}s")


# ------------------------------------------------------------ criterion 5

def _bacc_oracle(confusion):
    recalls = [row[i] / sum(row) for i, row in enumerate(confusion) if sum(row)]
    return sum(recalls) / len(recalls)


def _prf_oracle(confusion):
    confusion = np.asarray(confusion, dtype=float)
    total = confusion.sum()
    p = r = f = 0.0
    for i in range(confusion.shape[0]):
        support, predicted, tp = confusion[i].sum(), confusion[:, i].sum(), confusion[i, i]
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        p += support / total * precision
        r += support / total * recall
        f += support / total * f1
    return p, r, f


def _auc_oracle(scores, positive):
    concordant = pairs = 0.0
    for sp, yp in zip(scores, positive):
        if not yp:
            continue
        for sn, yn in zip(scores, positive):
            if yn:
                continue
            pairs += 1
            concordant += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return concordant / pairs


def test_criterion_05_metric_oracles():
    start = time.time()
    rng = np.random.default_rng(5)
    for _ in range(200):
        k = int(rng.integers(2, 7))
        confusion = rng.integers(0, 15, size=(k, k))
        confusion[np.arange(k), np.arange(k)] += 1
        assert abs(balanced_accuracy(confusion) - _bacc_oracle(confusion.tolist())) < 1e-9
        ours = weighted_prf(confusion)
        oracle = _prf_oracle(confusion)
        assert max(abs(a - b) for a, b in zip(ours, oracle)) < 1e-9
    for _ in range(200):
        n = int(rng.integers(4, 25))
        scores = np.round(rng.uniform(size=(n, 2)), 1)
        labels = rng.choice(["A", "B"], size=n).tolist()
        if len(set(labels)) < 2:
            continue
        ours = auc_macro_ovr(scores, labels, ("A", "B"))
        oracle = np.mean([
            _auc_oracle(scores[:, 0], [t == "A" for t in labels]),
            _auc_oracle(scores[:, 1], [t == "B" for t in labels]),
        ])
        assert abs(ours - oracle) < 1e-9
    elapsed = time.time() - start
    assert elapsed < 30.0
    report_pass(5, f"200 confusion matrices + 200 score sets within 1e-9, {elapsed:.1f}s")


# ------------------------------------------------------------ criterion 6

def _ranks_by_counting(row):
    return [sum(1 for u in row if u < v) + (sum(1 for u in row if u == v) + 1) / 2.0
            for v in row]


def _friedman_oracle(scores):
    scores = np.asarray(scores, dtype=float)
    n, k = scores.shape
    rank_rows = [_ranks_by_counting(row) for row in scores]
    column_sums = [sum(r[j] for r in rank_rows) for j in range(k)]
    ties = sum(
        t**3 - t
        for row in scores
        for t in (list(row).count(v) for v in set(row))
    )
    c = 1.0 - ties / (n * k * (k * k - 1))
    if c <= 0:
        return 0.0, 1.0
    chisq = (12.0 / (n * k * (k + 1)) * sum(s * s for s in column_sums)
             - 3.0 * n * (k + 1)) / c
    p = float(mpmath.gammainc((k - 1) / 2.0, chisq / 2.0, mpmath.inf, regularized=True))
    return chisq, p


def _wilcoxon_oracle(a, b):
    diffs = [x - y for x, y in zip(a, b) if x != y]
    ranks = _ranks_by_counting([abs(d) for d in diffs])
    w_plus = sum(r for d, r in zip(diffs, ranks) if d > 0)
    count_le = count_ge = 0
    for signs in itertools.product((0, 1), repeat=len(diffs)):
        w = sum(r for s, r in zip(signs, ranks) if s)
        count_le += w <= w_plus + 1e-12
        count_ge += w >= w_plus - 1e-12
    total = 2 ** len(diffs)
    return min(1.0, 2.0 * min(count_le / total, count_ge / total))


def test_criterion_06_statistics_oracles():
    start = time.time()

    # Friedman, k = 2: exhaustive over every per-block outcome pattern
    # (first wins / second wins / tie) for 2..5 blocks
    for n in range(2, 6):
        for pattern in itertools.product((0, 1, 2), repeat=n):
            scores = np.array(
                [[0.0, 1.0] if p == 0 else ([1.0, 0.0] if p == 1 else [0.5, 0.5])
                 for p in pattern]
            )
            ours = friedman_test(scores)
            oracle = _friedman_oracle(scores)
            assert abs(ours[1] - oracle[1]) < 1e-9
            assert abs(ours[0] - oracle[0]) < 1e-9

    # Friedman, k = 3: random battery on a coarse grid (ties frequent)
    rng = np.random.default_rng(6)
    for _ in range(400):
        n = int(rng.integers(2, 6))
        scores = rng.integers(0, 4, size=(n, 3)).astype(float) / 2.0
        ours = friedman_test(scores)
        oracle = _friedman_oracle(scores)
        assert abs(ours[1] - oracle[1]) < 1e-9

    # Wilcoxon: enumeration oracle over sign assignments, n <= 10
    checked = 0
    for _ in range(400):
        n = int(rng.integers(2, 11))
        a = np.round(rng.uniform(size=n), 1)
        b = np.round(rng.uniform(size=n), 1)
        if np.all(a == b):
            continue
        _, p = wilcoxon_signed_rank(a, b)
        assert abs(p - _wilcoxon_oracle(a.tolist(), b.tolist())) < 1e-9
        checked += 1
    assert checked > 300

    # pinned examples: identical ordering and three positive differences
    statistic, p = friedman_test(np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9.0]]))
    assert statistic == pytest.approx(6.0, abs=1e-12)
    assert p == pytest.approx(math.exp(-3.0), abs=1e-9)
    statistic, p = wilcoxon_signed_rank([2.0, 3.0, 4.0], [1.0, 1.0, 1.0])
    assert (statistic, p) == (0.0, pytest.approx(0.25, abs=1e-12))

    elapsed = time.time() - start
    assert elapsed < 120.0
    report_pass(6, f"exhaustive k=2 battery + {400 + checked} randomized cases, {elapsed:.1f}s")


# ------------------------------------------------------------ criterion 7

def test_criterion_07_gradient_check():
    start = time.time()
    torch.manual_seed(7)
    head = FusionHead(build_head(FusionConfig(
        c_f=0.8, backbone_dim=40, scenario="fused"))).double()
    head.eval()
    x = torch.randn(6, 40, dtype=torch.float64)
    clinical = torch.rand(6, 28, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 3, 4, 5])
    weights = torch.tensor([2.97, 3.65, 24.06, 8.22, 10.82, 7.50],
                           dtype=torch.float64)

    def loss_value():
        return weighted_cross_entropy(head(x, clinical), labels, weights)

    loss_value().backward()
    weight = head.reducer[0].weight
    grad = weight.grad.clone()

    rng = np.random.default_rng(7)
    eps = 1e-6
    for _ in range(20):
        i = int(rng.integers(weight.shape[0]))
        j = int(rng.integers(weight.shape[1]))
        with torch.no_grad():
            orig = weight[i, j].item()
            weight[i, j] = orig + eps
            up = loss_value().item()
            weight[i, j] = orig - eps
            down = loss_value().item()
            weight[i, j] = orig
        numeric = (up - down) / (2 * eps)
        denom = max(abs(numeric), abs(grad[i, j].item()), 1e-8)
        assert abs(numeric - grad[i, j].item()) / denom < 1e-4
    elapsed = time.time() - start
    assert elapsed < 60.0
    report_pass(7, f"20 reducer weights within 1e-4 relative, {elapsed:.1f}s")


# ------------------------------------------------------------ criterion 8

def test_criterion_08_freeze_contract(tmp_path):
    from conftest import image_manifest

    start = time.time()
    manifest = image_manifest(tmp_path, {"ACK": 12, "BCC": 12, "MEL": 12}, side=16)
    folds = make_folds(manifest, k=3, seed=0, group_by_patient=False)
    torch.manual_seed(8)
    extractor = create_extractor("tiny")
    head = FusionHead(build_head(FusionConfig(
        c_f=0.8, backbone_dim=64, scenario="fused", n_classes=3)))
    model = FusedClassifier(extractor, head)
    backbone_before = [p.detach().clone() for p in extractor.parameters()]
    head_before = [p.detach().clone() for p in head.parameters()]
    config = TrainConfig(phase1_epochs=2, phase2_epochs=0, lr_phase1=1e-3,
                         plateau_patience=2, early_stop_patience=3,
                         batch_size=18, seed=0)
    model, _ = train_two_phase(model, manifest, folds, 0, config, side=16)
    assert all(torch.equal(a, b)
               for a, b in zip(backbone_before, model.extractor.parameters()))
    assert any(not torch.equal(a, b)
               for a, b in zip(head_before, model.head.parameters()))
    elapsed = time.time() - start
    assert elapsed < 60.0
    report_pass(8, f"backbone bit-identical, head updated, {elapsed:.1f}s")


# ------------------------------------------------------ criteria 9 and 10

STUDY_SEEDS = (0, 1, 2)


def _scenario_study(data_dir, out_dir, seed):
    config = ExperimentConfig(
        manifest=str(data_dir / "manifest.csv"),
        out_dir=str(out_dir),
        backbones=("tiny",),
        scenarios=("image_only", "fused"),
        cf_values=(0.8,),
        folds=5,
        seed=seed,
        input_side=16,
        train=TrainConfig(phase1_epochs=8, phase2_epochs=6, lr_phase1=3e-3,
                          lr_phase2=5e-4, plateau_patience=3,
                          early_stop_patience=5, batch_size=32, seed=0),
        augment=AugmentPolicy.disabled(),
    )
    return run_experiment(config)


@pytest.fixture(scope="module")
def scenario_study(tmp_path_factory):
    base = tmp_path_factory.mktemp("study")
    data_dir = base / "data"
    generate_synthetic(data_dir, 600, informativeness=Informativeness(0.6, 0.6),
                       seed=1234)
    start = time.time()
    passes = []
    for attempt in ("a", "b"):
        runs = [_scenario_study(data_dir, base / f"runs-{attempt}{s}", s)
                for s in STUDY_SEEDS]
        passes.append(runs)
    return passes[0], passes[1], time.time() - start


def _per_pair_bacc(runs):
    image_only, fused = [], []
    for artifacts in runs:
        by_scenario = {}
        for cell in artifacts.cells:
            assert cell.completed, cell.error
            by_scenario.setdefault(cell.scenario, {})[cell.fold] = cell.report.bacc
        for fold in sorted(by_scenario["image_only"]):
            image_only.append(by_scenario["image_only"][fold])
            fused.append(by_scenario["fused"][fold])
    return np.array(image_only), np.array(fused)


def test_criterion_09_fusion_beats_image_only(scenario_study):
    first_pass, _, elapsed = scenario_study
    image_only, fused = _per_pair_bacc(first_pass)
    assert len(image_only) == len(STUDY_SEEDS) * 5
    margin = fused.mean() - image_only.mean()
    assert margin >= 0.03

    matrix = ScoreMatrix(
        np.stack([image_only, fused], axis=1), ("image_only", "fused"),
    )
    verdict = compare_models(matrix, alpha_friedman=0.05, alpha_wilcoxon=0.05)
    assert verdict.friedman_significant
    assert verdict.pairwise is not None and verdict.pairwise[0].significant

    assert elapsed < 15 * 60
    report_pass(9, f"margin {margin:+.3f} BACC over 15 fold-pairs, "
                   f"Wilcoxon p={verdict.pairwise[0].p_value:.2e}, {elapsed:.0f}s both passes")


def test_criterion_10_end_to_end_determinism(scenario_study):
    first_pass, second_pass, _ = scenario_study
    for run_a, run_b in zip(first_pass, second_pass):
        assert run_a.folds == run_b.folds  # identical fold assignments
        rows_a = {r.name: r for r in run_a.aggregate.rows}
        rows_b = {r.name: r for r in run_b.aggregate.rows}
        assert rows_a.keys() == rows_b.keys()
        for name in rows_a:
            for metric, value in rows_a[name].means.items():
                assert abs(value - rows_b[name].means[metric]) < 1e-3
            for metric, value in rows_a[name].stds.items():
                assert abs(value - rows_b[name].stds[metric]) < 1e-3
    report_pass(10, "fold assignments identical, aggregates within 1e-3")
