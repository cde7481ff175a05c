"""Classification metrics: auROC, auROC50 and top-k accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import LabelMismatch

__all__ = ["roc_curve", "auroc", "auroc50", "topk_accuracy", "MetricReport", "evaluate"]


def _binary(y_true, scores):
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise LabelMismatch(f"labels {y.shape} and scores {s.shape} must be matching vectors")
    pos = y > 0
    if pos.all() or not pos.any():
        raise LabelMismatch("ROC metrics need both positive and negative labels")
    return pos, s


def roc_curve(y_true, scores):
    """Vertices ``(fpr, tpr)`` of the exact ROC step function.

    Tied scores form one vertex, so the segment across a tie group is the
    diagonal that pair counting with ties worth one half implies.
    """
    pos, s = _binary(y_true, scores)
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(pos)[last]
    fp = np.cumsum(~pos)[last]
    fpr = np.r_[0.0, fp / fp[-1]]
    tpr = np.r_[0.0, tp / tp[-1]]
    return fpr, tpr


def auroc(y_true, scores) -> float:
    """Area under the ROC curve by the trapezoid rule; labels ``> 0`` are positive."""
    fpr, tpr = roc_curve(y_true, scores)
    return float(np.trapezoid(tpr, fpr)) if hasattr(np, "trapezoid") else float(np.trapz(tpr, fpr))


def auroc50(y_true, scores, max_fpr: float = 0.5) -> float:
    """ROC area over false-positive rates ``<= max_fpr``, divided by ``max_fpr``.

    A perfect ranking scores 1 and a random one about ``max_fpr / 2``.  This is
    the rate-based convention, not the count-based "first 50 false
    positives" one.
    """
    fpr, tpr = roc_curve(y_true, scores)
    cut = np.searchsorted(fpr, max_fpr, side="right")
    x = np.r_[fpr[:cut], max_fpr]
    y = np.r_[tpr[:cut], np.interp(max_fpr, fpr, tpr)]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0) / max_fpr)


def topk_accuracy(y_true, scores, k: int = 1) -> float:
    """Fraction of rows whose true class is among the ``k`` highest scores (ties count against)."""
    y = np.asarray(y_true, dtype=np.int64)
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != y.shape[0]:
        raise LabelMismatch(f"scores {S.shape} do not match {y.shape[0]} labels")
    true = S[np.arange(len(y)), y]
    rank = np.sum(S > true[:, None], axis=1) + np.sum((S == true[:, None]), axis=1) - 1
    return float(np.mean(rank < k))


@dataclass
class MetricReport:
    n: int
    auroc: float | None = None
    auroc50: float | None = None
    topk: dict = field(default_factory=dict)
    class_counts: dict = field(default_factory=dict)

    def lines(self):
        out = [f"n={self.n}"]
        if self.auroc is not None:
            out.append(f"auroc={self.auroc:.6f}")
            out.append(f"auroc50={self.auroc50:.6f}")
        for k, v in sorted(self.topk.items()):
            out.append(f"top{k}={v:.6f}")
        for c, count in sorted(self.class_counts.items()):
            out.append(f"count[{c}]={count}")
        return out

    def __str__(self):
        return "\n".join(self.lines())


def evaluate(y_true, scores, ks=(1, 5)) -> MetricReport:
    """ROC metrics for a score vector, top-k accuracies for a score matrix."""
    y = np.asarray(y_true)
    S = np.asarray(scores, dtype=np.float64)
    values, counts = np.unique(y, return_counts=True)
    report = MetricReport(n=len(y), class_counts={int(v): int(c) for v, c in zip(values, counts)})
    if S.ndim == 1:
        report.auroc = auroc(y, S)
        report.auroc50 = auroc50(y, S)
    else:
        report.topk = {k: topk_accuracy(y, S, k) for k in ks if k <= S.shape[1]}
    return report
