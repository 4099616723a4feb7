"""Confusion-matrix accumulation, macro precision/recall/F1, top-k accuracy,
crop-conditional prediction and random-guessing baselines."""

from dataclasses import dataclass, field

import numpy as np


class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted.

    Accumulation is a commutative monoid: per-shard matrices can be summed.
    """

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts shape {counts.shape} != K={num_classes}")
            if (counts < 0).any():
                raise ValueError("confusion counts must be nonnegative")
            self.counts = counts

    def update(self, true_labels, predicted):
        np.add.at(self.counts, (np.asarray(true_labels), np.asarray(predicted)), 1)

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    precision: list
    recall: list
    f1: list
    mean_precision: float
    mean_recall: float
    mean_f1: float
    accuracy: float
    sample_count: int
    epoch: int | None = None
    train_loss: float | None = None
    test_loss: float | None = None
    extra: dict = field(default_factory=dict)


def macro_metrics(cm):
    """Per-class precision/recall/F1 and their unweighted means.

    A class with a zero denominator contributes 0 to the corresponding mean
    (never-predicted / never-seen classes are penalized, not excluded).
    """
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts).astype(np.float64)
    col = counts.sum(axis=0).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(col > 0, diag / col, 0.0)
        rec = np.where(row > 0, diag / row, 0.0)
        pr = prec + rec
        f1 = np.where(pr > 0, 2.0 * prec * rec / np.where(pr > 0, pr, 1.0), 0.0)
    return MetricsReport(
        precision=prec.tolist(),
        recall=rec.tolist(),
        f1=f1.tolist(),
        mean_precision=float(prec.mean()),
        mean_recall=float(rec.mean()),
        mean_f1=float(f1.mean()),
        accuracy=float(diag.sum() / total),
        sample_count=int(total),
    )


def topk_accuracy(logits, labels, k):
    """Fraction of rows whose true label is in the k largest logits.

    Ties break toward the lower class index.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    if k > num_classes:
        raise ValueError(f"k={k} exceeds class count {num_classes}")
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hits = (order == labels[:, None]).any(axis=1)
    return float(hits.mean())


def argmax_predict(logits):
    """Row-wise argmax with lowest-index tie-break."""
    return np.argmax(np.asarray(logits), axis=1)


def crop_conditional_predict(logits_row, known_crop, registry):
    """Argmax restricted to the classes of the known crop."""
    candidates = registry.classes_for_crop(known_crop)
    logits_row = np.asarray(logits_row)
    sub = logits_row[candidates]
    return candidates[int(np.argmax(sub))]


def random_baseline(num_classes):
    """Expected accuracy of uniform random guessing over K classes."""
    if num_classes < 1:
        raise ValueError("need at least one class")
    return 1.0 / num_classes


def crop_restricted_baseline(registry, n_min):
    """Restrict to crops with at least n_min classes.

    Returns (class_count, crop_count, baseline) where baseline is the
    expected accuracy of uniform within-crop guessing under uniform
    sampling over the restricted classes: crop_count / class_count.
    """
    if n_min < 2:
        raise ValueError(f"n_min must be >= 2, got {n_min}")
    kept_crops = [c for c in registry.crops if len(registry.classes_for_crop(c)) >= n_min]
    class_count = sum(len(registry.classes_for_crop(c)) for c in kept_crops)
    if not kept_crops:
        raise ValueError(f"no crop has {n_min} or more classes")
    return class_count, len(kept_crops), len(kept_crops) / class_count
