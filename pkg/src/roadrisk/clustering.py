"""Frequency-based k-means over segments and cluster-aware random resampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .errors import DataError

log = logging.getLogger(__name__)

RESAMPLE_MODES = ("NoR", "RUS", "ROS")


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignment: dict
    sse: float

    def cluster_of(self, segment_id) -> int:
        return self.assignment[segment_id]


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so equal distances go to the lower index
    return np.abs(x[:, None] - centroids[None, :]).argmin(axis=1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, (x - x[idx]) ** 2)
    return np.array(centers, dtype=float)


def _lloyd(x, centroids, max_iter, tol):
    for _ in range(max_iter):
        labels = _assign(x, centroids)
        new = centroids.copy()
        for j in range(len(centroids)):
            members = x[labels == j]
            if len(members):
                # the clip keeps equal members exact despite rounding in the mean
                new[j] = min(max(members.mean(), members.min()), members.max())
        moved = np.abs(new - centroids).max()
        centroids = new
        if moved < tol:
            break
    labels = _assign(x, centroids)
    sse = float(((x - centroids[labels]) ** 2).sum())
    return centroids, sse


def fit_kmeans(rates: Mapping, k: int = 2, seed: int = 0, n_init: int = 10,
               max_iter: int = 300, tol: float = 1e-10) -> ClusterModel:
    """1-D k-means on per-segment incident rates.

    k-means++ seeding, best of ``n_init`` restarts by SSE (ties to the earlier
    restart). Centroids come back sorted descending, so cluster 0 is the
    highest-frequency group.
    """
    ids = sorted(rates)
    x = np.array([float(rates[i]) for i in ids])
    if k < 1:
        raise ValueError("k must be positive")
    if len(np.unique(x)) < k:
        raise DataError(f"need at least {k} distinct rates for k-means, got {len(np.unique(x))}")
    best = None
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(n_init)):
        rng = np.random.default_rng(child)
        c, sse = _lloyd(x, _kmeanspp(x, k, rng), max_iter, tol)
        if best is None or sse < best[1]:
            best = (c, sse)
    centroids = np.sort(best[0])[::-1].copy()
    labels = _assign(x, centroids)
    sse = float(((x - centroids[labels]) ** 2).sum())
    return ClusterModel(k, centroids, {i: int(l) for i, l in zip(ids, labels)}, sse)


def segment_rates(frame: pd.DataFrame) -> dict:
    """Fraction of each segment's windows with at least one incident."""
    return frame.groupby("segment_id")["label"].mean().to_dict()


def target_fractions(positive_fractions: Mapping[int, float]) -> dict:
    """Per-cluster target positive fraction.

    Cluster 0 is balanced to 0.5; every other cluster keeps its original
    ratio to cluster 0.
    """
    f0 = positive_fractions[0]
    if f0 <= 0:
        raise DataError("top cluster has no positive records")
    out = {}
    for c, f in positive_fractions.items():
        t = 0.5 * f / f0
        if t > 0.5:
            log.warning("cluster %s is denser than cluster 0; capping its target at 0.5", c)
            t = 0.5
        out[c] = t
    return out


@dataclass
class ResamplePlan:
    mode: str
    targets: dict
    seed: int

    def __post_init__(self):
        if self.mode not in RESAMPLE_MODES:
            raise ValueError(f"unknown resampling mode {self.mode!r}")


def resample(records: pd.DataFrame, target: float, mode: str, seed, cluster=None) -> pd.DataFrame:
    """Random under/over-sampling of one cluster's records to a positive fraction.

    RUS keeps every positive and draws round(P(1-f)/f) negatives without
    replacement. ROS keeps every record and tops positives up, drawing with
    replacement, to round(N f/(1-f)). When the target is already met or
    exceeded the records pass through unchanged.
    """
    if mode == "NoR":
        return records
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"unknown resampling mode {mode!r}")
    if not 0 < target <= 0.5:
        raise ValueError(f"target fraction {target} outside (0, 0.5]")
    rng = np.random.default_rng(seed)
    label = records["label"].to_numpy()
    pos = np.flatnonzero(label == 1)
    neg = np.flatnonzero(label == 0)
    if len(pos) == 0:
        raise DataError(f"cluster {cluster}: no positive records to resample")
    if mode == "RUS":
        n_neg = int(round(len(pos) * (1 - target) / target))
        if n_neg >= len(neg):
            return records
        keep_neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
        idx = np.sort(np.concatenate([pos, keep_neg]))
        return records.iloc[idx]
    n_pos = int(round(len(neg) * target / (1 - target)))
    if n_pos <= len(pos):
        return records
    extra = rng.choice(pos, size=n_pos - len(pos), replace=True)
    return records.iloc[np.concatenate([np.arange(len(records)), extra])]


def write_clusters(model: ClusterModel, rates: Mapping, path) -> None:
    rows = [(s, model.assignment[s], float(rates[s])) for s in sorted(model.assignment)]
    pd.DataFrame(rows, columns=["segment_id", "cluster_id", "rate"]).to_csv(
        path, index=False, float_format="%.10g", lineterminator="\n")
