"""Confusion matrices, classification metrics with Wald CIs, the pooled
two-proportion z test, and the threshold sweep harness.

Confusion matrices are laid out rows = predicted, columns = true; every
renderer prints that convention so plots from other sources (which often
transpose) cannot be misread. Point estimates carry 95% normal-
approximation intervals, p +/- 1.96 * sqrt(p(1-p)/n), clamped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import store as store_mod
from . import tensorio
from .attention import GcmlConfig, flatten_bits, key_from_bits
from .cam import ClassifierHead, class_scores, compute_cam, minmax_normalize
from .store import GcmlStore, augment_rng, epoch_seed, jitter_stack

WALD_Z = 1.96  # two-sided 95%


class Estimate(NamedTuple):
    point: float
    ci_low: float
    ci_high: float


@dataclass
class MetricReport:
    accuracy: Estimate
    macro_f1: Estimate
    weighted_f1: Estimate
    sensitivity: Estimate
    per_class_accuracy: list[Estimate]
    per_class_support: list[int]
    n: int


@dataclass
class ZTestResult:
    z: float
    p1: float
    p2: float
    n: int
    p_hat: float


def confusion(preds: Sequence[int], truth: Sequence[int], num_classes: int) -> np.ndarray:
    """Tally (predicted, true) pairs into a num_classes x num_classes matrix."""
    if len(preds) != len(truth):
        raise ValueError(f"{len(preds)} predictions vs {len(truth)} labels")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(preds, truth):
        if not (0 <= p < num_classes and 0 <= t < num_classes):
            raise ValueError(f"label pair ({p}, {t}) out of range for {num_classes} classes")
        cm[p, t] += 1
    return cm


def wald_ci(p: float, n: int) -> tuple[float, float]:
    """95% normal-approximation interval for a proportion, clamped to [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"proportion {p} outside [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    half = WALD_Z * math.sqrt(p * (1.0 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


def _estimate(p: float, n: int) -> Estimate:
    if n < 1:
        return Estimate(0.0, 0.0, 0.0)
    lo, hi = wald_ci(p, n)
    return Estimate(p, lo, hi)


def metrics(cm: np.ndarray) -> MetricReport:
    """Accuracy, F1 aggregates, and sensitivity (macro recall) with CIs.

    Per-class accuracy is that class's recall and gets an interval at
    its own support; aggregate metrics use the full sample count.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix counts must be >= 0")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    num_classes = cm.shape[0]
    support = cm.sum(axis=0)          # true counts per class
    predicted = cm.sum(axis=1)
    diag = np.diagonal(cm)

    recall = np.divide(diag, support, out=np.zeros(num_classes), where=support > 0)
    precision = np.divide(diag, predicted, out=np.zeros(num_classes), where=predicted > 0)
    pr_sum = precision + recall
    f1 = np.divide(2 * precision * recall, pr_sum, out=np.zeros(num_classes), where=pr_sum > 0)

    accuracy = float(diag.sum() / total)
    macro_f1 = float(f1.mean())
    weighted_f1 = float((f1 * support).sum() / total)
    sensitivity = float(recall.mean())

    per_class = [
        _estimate(float(recall[c]), int(support[c])) for c in range(num_classes)
    ]
    return MetricReport(
        accuracy=_estimate(accuracy, total),
        macro_f1=_estimate(macro_f1, total),
        weighted_f1=_estimate(weighted_f1, total),
        sensitivity=_estimate(sensitivity, total),
        per_class_accuracy=per_class,
        per_class_support=[int(x) for x in support],
        n=total,
    )


def two_proportion_z(correct1: int, correct2: int, n: int) -> ZTestResult:
    """Pooled-variance z statistic for two accuracies on equal-size samples.

    z = (p1 - p2) / sqrt(2 * p_hat * (1 - p_hat) / n) with
    p_hat = (correct1 + correct2) / (2n). Negative z means the second
    classifier is the more accurate one.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0 <= correct1 <= n and 0 <= correct2 <= n):
        raise ValueError("correct counts must lie in [0, n]")
    p1 = correct1 / n
    p2 = correct2 / n
    p_hat = (correct1 + correct2) / (2 * n)
    if p_hat in (0.0, 1.0):
        if p1 != p2:
            raise ValueError("degenerate pooled proportion with unequal proportions")
        z = 0.0
    else:
        z = (p1 - p2) / math.sqrt(2.0 * p_hat * (1.0 - p_hat) / n)
    return ZTestResult(z=z, p1=p1, p2=p2, n=n, p_hat=p_hat)


class SweepRow(NamedTuple):
    tau: float
    accuracy: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best_tau: float


def _normalized_cam(f: np.ndarray, head: ClassifierHead, c: int) -> np.ndarray:
    return minmax_normalize(compute_cam(f, head, c)).values


def tau_sweep(
    dataset: tensorio.DatasetManifest,
    head: ClassifierHead,
    taus: Sequence[float],
    epochs: int = 1,
    eval_dataset: Optional[tensorio.DatasetManifest] = None,
    augment_seed: Optional[int] = None,
    alpha: float = 0.0,
    fallback: str = "cnn",
    bit_order: str = "little",
) -> SweepResult:
    """Train one store per threshold and report each one's accuracy.

    Normalized activation maps are computed once per sample (and per
    epoch when jitter is on) and re-thresholded for every tau, so the
    sweep costs one CAM pass regardless of how many thresholds are
    tried. Evaluates on eval_dataset when given, else on the training
    data. Best tau is the argmax accuracy, earliest listed on ties.
    """
    if not taus:
        raise ValueError("need at least one tau")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    for tau in taus:
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau {tau} outside [0, 1]")
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    num_classes = len(dataset.classes)
    if head.num_classes != num_classes:
        raise ValueError("head class count does not match dataset")

    # One normalized labeled CAM per (epoch, train sample).
    train_cams: list[tuple[np.ndarray, int]] = []
    for e in range(epochs):
        seed_e = None if augment_seed is None else epoch_seed(augment_seed, e)
        for index in range(len(dataset)):
            f, label = dataset.load_sample(index)
            if seed_e is not None:
                f = jitter_stack(f, augment_rng(seed_e, index))
            train_cams.append((_normalized_cam(f, head, label), label))

    # Normalized all-class CAMs plus pooled scores per eval sample.
    eval_cams: list[tuple[list[np.ndarray], np.ndarray, int]] = []
    for index in range(len(eval_dataset)):
        f, label = eval_dataset.load_sample(index)
        cams = [_normalized_cam(f, head, c) for c in range(num_classes)]
        eval_cams.append((cams, class_scores(f, head), label))

    grid_h, grid_w = train_cams[0][0].shape if train_cams else eval_cams[0][0][0].shape
    rows: list[SweepRow] = []
    for tau in taus:
        cfg = GcmlConfig(tau=tau, grid_h=grid_h, grid_w=grid_w, bit_order=bit_order)
        s = GcmlStore(classes=list(dataset.classes), cfg=cfg, pooling=head.pooling)
        for cam_values, label in train_cams:
            key = key_from_bits(flatten_bits(cam_values >= cfg.tau), cfg.bit_order)
            s.rows[label][key] = s.rows[label].get(key, 0) + 1
            s.row_totals[label] += 1
        correct = 0
        for cams, scores, label in eval_cams:
            keys = [
                key_from_bits(flatten_bits(cams[c] >= cfg.tau), cfg.bit_order)
                for c in range(num_classes)
            ]
            likelihoods = [
                store_mod.lookup(s, c, keys[c], alpha=alpha) for c in range(num_classes)
            ]
            winner, _ = store_mod.argmax_or_fallback(likelihoods, scores, fallback)
            if winner == label:
                correct += 1
        rows.append(SweepRow(tau=cfg.tau, accuracy=correct / len(eval_cams)))

    best = max(range(len(rows)), key=lambda i: rows[i].accuracy)
    # max() already keeps the earliest index on ties
    return SweepResult(rows=rows, best_tau=rows[best].tau)


def metrics_csv(report: MetricReport, class_labels: Sequence[str]) -> str:
    """One CSV row per metric: name, point, ci_low, ci_high, n."""
    lines = ["name,point,ci_low,ci_high,n"]

    def row(name: str, est: Estimate, n: int) -> None:
        lines.append(
            f"{name},{est.point:.10g},{est.ci_low:.10g},{est.ci_high:.10g},{n}"
        )

    row("accuracy", report.accuracy, report.n)
    row("macro_f1", report.macro_f1, report.n)
    row("weighted_f1", report.weighted_f1, report.n)
    row("sensitivity", report.sensitivity, report.n)
    for label, est, support in zip(
        class_labels, report.per_class_accuracy, report.per_class_support
    ):
        row(f"class_accuracy:{label}", est, support)
    return "\n".join(lines) + "\n"


def render_confusion(cm: np.ndarray, class_labels: Sequence[str]) -> str:
    """Readable matrix with the axis convention spelled out."""
    cm = np.asarray(cm)
    width = max(
        [len(str(int(cm.max()))) if cm.size else 1] + [len(l) for l in class_labels]
    )
    lines = ["confusion matrix (rows = predicted, cols = true)"]
    header = " " * (width + 2) + " ".join(f"{l:>{width}}" for l in class_labels)
    lines.append(header)
    for i, label in enumerate(class_labels):
        cells = " ".join(f"{int(cm[i, j]):>{width}}" for j in range(cm.shape[1]))
        lines.append(f"{label:>{width}} |{cells}")
    return "\n".join(lines) + "\n"
