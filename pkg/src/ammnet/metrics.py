"""Confusion-matrix segmentation metrics: mOA, mF1, mIoU.

Rows of the matrix are ground-truth classes, columns are predictions.  For
class k, ``n_kk`` is the diagonal entry, ``t_k`` the row sum and ``p_k`` the
column sum:

    mOA  = mean_k n_kk / t_k
    mF1  = mean_k 2 n_kk / (p_k + t_k)
    mIoU = mean_k n_kk / (t_k + p_k - n_kk)

Each mean runs over the classes whose denominator is non-zero, so a class
absent from both ground truth and prediction does not count, and mOA (which
is a per-class accuracy, not a global pixel accuracy) skips classes missing
from the ground truth.  All ratios are computed in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvariantError

IGNORE = 255


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise DataError(f"confusion counts shape {self.counts.shape} != {(self.num_classes,) * 2}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def accumulate(self, pred, gt, ignore=(IGNORE,)) -> "ConfusionMatrix":
        self.counts += accumulate(ConfusionMatrix(self.num_classes), pred, gt, ignore).counts
        return self


def accumulate(cm: ConfusionMatrix, pred, gt, ignore=(IGNORE,)) -> ConfusionMatrix:
    """New matrix equal to ``cm`` plus the tally of (gt, pred) over non-ignored pixels."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} extents differ")
    keep = ~np.isin(gt, list(ignore))
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    K = cm.num_classes
    for name, arr in (("ground truth", g), ("prediction", p)):
        bad = (arr < 0) | (arr >= K)
        if bad.any():
            raise DataError(f"{name} class {int(arr[bad][0])} outside [0, {K - 1}]")
    tally = np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(K, cm.counts + tally)


def _parts(cm: ConfusionMatrix):
    c = cm.counts.astype(np.float64)
    if c.sum() == 0:
        raise InvariantError("metrics are undefined for an empty confusion matrix")
    return np.diag(c), c.sum(axis=1), c.sum(axis=0)


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    n, t, _ = _parts(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(t > 0, n / t, np.nan)


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    n, t, p = _parts(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(p + t > 0, 2 * n / (p + t), np.nan)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    n, t, p = _parts(cm)
    union = t + p - n
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, n / union, np.nan)


def _mean(values: np.ndarray) -> float:
    included = values[~np.isnan(values)]
    return float(included.sum() / included.size)


def moa(cm: ConfusionMatrix) -> float:
    return _mean(per_class_accuracy(cm))


def mf1(cm: ConfusionMatrix) -> float:
    return _mean(per_class_f1(cm))


def miou(cm: ConfusionMatrix) -> float:
    return _mean(per_class_iou(cm))


def metrics_record(cm: ConfusionMatrix, *, epoch, split: str, seed: int, config_hash: str, **extra) -> dict:
    f1 = per_class_f1(cm)
    rec = {
        "epoch": epoch,
        "split": split,
        "per_class_f1": [None if np.isnan(v) else float(v) for v in f1],
        "moa": moa(cm),
        "mf1": mf1(cm),
        "miou": miou(cm),
        "seed": seed,
        "config_hash": config_hash,
    }
    rec.update(extra)
    return rec


def append_jsonl(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
