"""Error metrics and rank-based AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from agg.errors import DataError


def _residuals(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise DataError(f"prediction length {pred.size} != truth length {truth.size}")
    if pred.size == 0:
        raise DataError("metrics need at least one value")
    return pred - truth


def rmse(pred, truth) -> float:
    r = _residuals(pred, truth)
    return float(np.sqrt(np.mean(r * r)))


def mae(pred, truth) -> float:
    return float(np.mean(np.abs(_residuals(pred, truth))))


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of ROC AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
