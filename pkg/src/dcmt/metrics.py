"""Classification and localization metrics: macro Recall/F1/AUC, IoU, TIoU."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .numerics import DimensionError

log = logging.getLogger(__name__)

TIOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
LEADERBOARD_HEADER = ["run_id", "labeled_fraction", "method", "recall", "f1", "auc", "tiou"]


class UsageError(ValueError):
    pass


@dataclass
class MetricsReport:
    recall: float
    f1: float
    auc: float
    tiou: float
    per_threshold_accuracy: dict[float, float] = field(default_factory=dict)
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))


def confusion_matrix(labels: Sequence[int], preds: Sequence[int], n: int) -> np.ndarray:
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def recall_f1(confusion: np.ndarray) -> tuple[float, float]:
    """Macro recall and macro F1 from a ``[true, pred]`` count matrix."""
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0 or cm.sum() == 0:
        raise UsageError("confusion matrix must be square and nonempty")
    tp = np.diag(cm)
    actual = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rec = np.where(actual > 0, tp / actual, 0.0)
        prec = np.where(predicted > 0, tp / predicted, 0.0)
        f1 = np.where(rec + prec > 0, 2 * rec * prec / (rec + prec), 0.0)
    return float(rec.mean()), float(f1.mean())


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)  # midranks resolve ties
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro(scores: np.ndarray, labels: Sequence[int]) -> float:
    """One-vs-rest AUC per class, averaged over the classes that can be scored."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise DimensionError(f"scores {scores.shape} vs {labels.size} labels")
    aucs = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            log.warning("class %d has no positives or no negatives; skipped in macro AUC", c)
            continue
        aucs.append(binary_auc(scores[:, c], pos))
    if not aucs:
        raise UsageError("no class could be scored for AUC")
    return float(np.mean(aucs))


def iou(attention: np.ndarray, seg: np.ndarray, bin_threshold: float = 0.5) -> float:
    attention = np.asarray(attention)
    seg = np.asarray(seg).astype(bool)
    if attention.shape != seg.shape:
        raise DimensionError(f"attention {attention.shape} vs seg {seg.shape}")
    a = attention > bin_threshold
    union = np.logical_or(a, seg).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, seg).sum() / union)


def tiou(per_sample_ious: Sequence[float], thresholds: Sequence[float] = TIOU_THRESHOLDS) -> tuple[float, dict[float, float]]:
    """Mean over thresholds of the fraction of samples with IoU strictly above it."""
    v = np.asarray(per_sample_ious, dtype=np.float64)
    if v.size == 0:
        raise UsageError("tiou needs at least one IoU value")
    acc = {float(t): float((v > t).mean()) for t in thresholds}
    return float(np.mean(list(acc.values()))), acc


def build_report(
    probs: np.ndarray,
    labels: Sequence[int],
    attention: np.ndarray,
    segs: np.ndarray,
    bin_threshold: float = 0.5,
) -> MetricsReport:
    """Full report from class probabilities and full-resolution attention maps."""
    probs = np.asarray(probs)
    n = probs.shape[1]
    cm = confusion_matrix(labels, probs.argmax(axis=1), n)
    rec, f1 = recall_f1(cm)
    ious = [iou(a, s, bin_threshold) for a, s in zip(attention, segs)]
    t, acc = tiou(ious)
    return MetricsReport(rec, f1, auc_macro(probs, labels), t, acc, cm)


def write_leaderboard(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LEADERBOARD_HEADER, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_threshold_csv(path: str | Path, rows: Sequence[tuple[str, MetricsReport]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id"] + [f"T{t}" for t in TIOU_THRESHOLDS])
        for run_id, rep in rows:
            w.writerow([run_id] + [repr(rep.per_threshold_accuracy[t]) for t in TIOU_THRESHOLDS])
