"""Classification metrics and correlations of per-segment marginals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import UndefinedCorrelationError

RESULT_COLUMNS = ("Model", "Clustering", "Resampling", "Name", "Accuracy", "Precision", "Recall",
                  "F1-Score", "Pearson", "Spearman")


@dataclass(frozen=True)
class Confusion:
    accuracy: float
    precision: float
    recall: float
    f1: float


def confusion_metrics(labels, predictions) -> Confusion:
    """Accuracy, precision, recall, F1 with label 1 (incident) as the positive class.

    Precision, recall and F1 are 0 when their denominator is 0.
    """
    y = np.asarray(labels).astype(int)
    p = np.asarray(predictions).astype(int)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {len(y)} labels vs {len(p)} predictions")
    if y.size == 0:
        raise ValueError("empty input")
    tp = int(np.sum((y == 1) & (p == 1)))
    fp = int(np.sum((y == 0) & (p == 1)))
    fn = int(np.sum((y == 1) & (p == 0)))
    tn = int(np.sum((y == 0) & (p == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return Confusion((tp + tn) / y.size, precision, recall, f1)


def spatial_marginals(records: pd.DataFrame, probabilities) -> tuple[pd.Series, pd.Series]:
    """Per-segment observed incident rate and mean predicted probability."""
    df = pd.DataFrame({"segment_id": records["segment_id"].to_numpy(),
                       "label": records["label"].to_numpy(),
                       "p": np.asarray(probabilities, dtype=float)})
    g = df.groupby("segment_id", sort=True)
    return g["label"].mean(), g["p"].mean()


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length inputs of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    return pearson(average_ranks(x), average_ranks(y))


def safe_corr(fn, x, y) -> float:
    try:
        return fn(x, y)
    except UndefinedCorrelationError:
        return float("nan")
