"""Evaluation measures for regression and binary classification heads."""
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ShapeError("metrics need at least one value")
    return p, t


def mae(pred, truth):
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def r2(pred, truth):
    p, t = _pair(pred, truth)
    ss_tot = np.sum((t - t.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("R2 is undefined for constant targets")
    return float(1.0 - np.sum((t - p) ** 2) / ss_tot)


def pearson(pred, truth):
    p, t = _pair(pred, truth)
    dp = p - p.mean()
    dt = t - t.mean()
    sp = np.sqrt(np.sum(dp * dp))
    st = np.sqrt(np.sum(dt * dt))
    if sp == 0 or st == 0:
        raise UndefinedMetricError("Pearson correlation is undefined for a constant input")
    r = np.sum(dp * dt) / (sp * st)
    return float(np.clip(r, -1.0, 1.0))


def roc_auc(scores, labels):
    """Mann-Whitney statistic with midranks, so ties earn half credit."""
    s, y = _pair(scores, labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes present")
    ranks = rankdata(s, method="average")
    u = np.sum(ranks[y == 1]) - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricReport:
    task: str
    n: int
    mae: float = None
    r2: float = None
    pearson: float = None
    roc_auc: float = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def regression_report(task, pred, truth):
    return MetricReport(task, len(truth), mae=mae(pred, truth), r2=r2(pred, truth),
                        pearson=pearson(pred, truth))


def classification_report(task, scores, labels):
    return MetricReport(task, len(labels), roc_auc=roc_auc(scores, labels))
