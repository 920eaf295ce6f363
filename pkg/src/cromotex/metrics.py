"""Binary classification metrics and across-seed summaries."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricReport:
    auroc: float
    f1: float
    threshold: float
    threshold_mode: str
    tp: int
    fp: int
    tn: int
    fn: int
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _binary(labels, n=None):
    labels = np.asarray(labels).reshape(-1)
    if n is not None and labels.shape[0] != n:
        raise ValueError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = _binary(labels, scores.shape[0])
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold: float = 0.5):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = _binary(labels, scores.shape[0])
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    return tp, fp, tn, fn


def f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 of ``scores >= threshold``; 0 when there are no TP, FP or FN."""
    tp, fp, _, fn = confusion(scores, labels, threshold)
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def best_f1_threshold(scores, labels) -> float:
    """Threshold among the observed scores maximizing F1 (lowest on ties)."""
    candidates = np.unique(np.asarray(scores, dtype=np.float64))
    values = [f1(scores, labels, t) for t in candidates]
    return float(candidates[int(np.argmax(values))])


def metric_report(scores, labels, threshold: float = 0.5, threshold_mode: str = "fixed") -> MetricReport:
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    return MetricReport(
        auroc=auroc(scores, labels),
        f1=f1(scores, labels, threshold),
        threshold=float(threshold),
        threshold_mode=threshold_mode,
        tp=tp, fp=fp, tn=tn, fn=fn, n=tp + fp + tn + fn,
    )


def seed_summary(values):
    """Mean and sample standard deviation (n - 1); a single value has std 0."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("no values to summarise")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std
