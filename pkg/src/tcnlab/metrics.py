"""Binary classification metrics: confusion matrix, scalar scores, ROC/AUC."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1", "auc", "mcc")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _as_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DataError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold=0.5) -> ConfusionMatrix:
    """Tally predictions ``score >= threshold`` against labels."""
    scores, labels = _as_binary(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num, den):
    return num / den if den else 0.0


def scalar_metrics(cm: ConfusionMatrix) -> dict:
    """Accuracy, precision, recall, F1 and MCC. Any 0/0 evaluates to 0."""
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
    return dict(
        accuracy=_ratio(tp + tn, cm.total),
        precision=precision,
        recall=recall,
        f1=f1,
        mcc=mcc,
    )


def roc_auc(scores, labels):
    """Trapezoidal AUC and ROC points from a sweep over distinct scores.

    Tied scores move TPR and FPR together, so the area equals the
    Mann-Whitney statistic with ties counted one half.
    """
    scores, labels = _as_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tps[ends] / n_pos]
    fpr = np.r_[0.0, fps[ends] / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = list(zip(fpr.tolist(), tpr.tolist()))
    return auc, points


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    mcc: float
    roc_points: list = field(default_factory=list)

    def row(self):
        return {c: getattr(self, c) for c in METRIC_COLUMNS}


def evaluate(scores, labels, threshold=0.5) -> EvalReport:
    cm = confusion(scores, labels, threshold)
    auc, points = roc_auc(scores, labels)
    return EvalReport(confusion=cm, auc=auc, roc_points=points, **scalar_metrics(cm))


def write_metrics_csv(reports: dict, path) -> None:
    """One row per model, columns in the order of the usual comparison table."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model",) + METRIC_COLUMNS + ("tp", "fp", "tn", "fn"))
        for name, rep in reports.items():
            cm = rep.confusion
            w.writerow(
                [name]
                + [f"{getattr(rep, c):.6f}" for c in METRIC_COLUMNS]
                + [cm.tp, cm.fp, cm.tn, cm.fn]
            )


def write_roc_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr"))
        for fpr, tpr in points:
            w.writerow((f"{fpr:.6f}", f"{tpr:.6f}"))
