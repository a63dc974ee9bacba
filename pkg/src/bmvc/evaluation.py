"""K-means on learned representations and the ACC / NMI / ARI / F-score metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeError

KMEANS_TOL = 1e-8
KMEANS_MAX_ITER = 300


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    nmi: float
    ari: float
    fscore: float

    def __post_init__(self):
        for name, lo in (("acc", 0.0), ("nmi", 0.0), ("ari", -1.0), ("fscore", 0.0)):
            v = getattr(self, name)
            if not np.isfinite(v) or not lo - 1e-12 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [{lo}, 1]")

    def to_json(self) -> dict:
        return {k: {"percent": round(100.0 * v, 2), "fraction": v} for k, v in asdict(self).items()}


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        closest = np.minimum(closest, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def _sq_dists(x, centers):
    d = np.sum(x * x, axis=1)[:, None] + np.sum(centers * centers, axis=1)[None, :] - 2.0 * x @ centers.T
    return np.maximum(d, 0.0)


def _lloyd(x, centers):
    k = centers.shape[0]
    for _ in range(KMEANS_MAX_ITER):
        d = _sq_dists(x, centers)
        labels = np.argmin(d, axis=1)
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        taken = set()
        point_cost = d[np.arange(len(x)), labels]
        for c in range(k):
            if counts[c]:
                new[c] = x[labels == c].mean(axis=0)
            else:
                # re-seed from the point farthest from its current centre
                for idx in np.argsort(-point_cost, kind="stable"):
                    if idx not in taken:
                        taken.add(int(idx))
                        new[c] = x[idx]
                        break
        shift = np.sqrt(np.max(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if shift < KMEANS_TOL:
            break
    d = _sq_dists(x, centers)
    labels = np.argmin(d, axis=1)
    return labels, float(d[np.arange(len(x)), labels].sum())


def kmeans(x, k: int, restarts: int = 10, seed: int = 0, return_inertia: bool = False):
    """k-means++ seeding plus Lloyd iterations, best of ``restarts`` by WCSS.

    Ties between restarts keep the earliest one.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 2 or n < k:
        raise ValueError(f"kmeans needs N >= k >= 2, got N={n}, k={k}")
    rng = np.random.default_rng(seed)
    best_labels, best_wcss = None, np.inf
    for _ in range(max(1, restarts)):
        labels, wcss = _lloyd(x, _kmeans_pp(x, k, rng))
        if wcss < best_wcss:
            best_labels, best_wcss = labels, wcss
    return (best_labels, best_wcss) if return_inertia else best_labels


def _check_pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"label length mismatch: {pred.size} vs {truth.size}")
    return pred, truth


def contingency(pred, truth) -> np.ndarray:
    pred, truth = _check_pair(pred, truth)
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1 if p.size else 0, t.max() + 1 if t.size else 0), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return table


def hungarian_accuracy(pred, truth) -> float:
    """Best one-to-one cluster→class mapping accuracy."""
    pred, truth = _check_pair(pred, truth)
    if pred.size == 0:
        return 0.0
    table = contingency(pred, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / pred.size


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth) -> float:
    """Mutual information normalised by the arithmetic mean of the entropies."""
    table = contingency(pred, truth).astype(np.float64)
    n = table.sum()
    if n == 0:
        raise ValueError("nmi needs at least one sample")
    h_pred, h_true = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if h_pred == 0.0 and h_true == 0.0:
        return 1.0
    pij = table / n
    outer = np.outer(pij.sum(axis=1), pij.sum(axis=0))
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    return float(np.clip(mi / (0.5 * (h_pred + h_true)), 0.0, 1.0))


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def ari(pred, truth) -> float:
    table = contingency(pred, truth)
    n = int(table.sum())
    if n < 2:
        raise ValueError("ari needs at least two samples")
    index = int(_comb2(table).sum())
    a = int(_comb2(table.sum(axis=1)).sum())
    b = int(_comb2(table.sum(axis=0)).sum())
    total = n * (n - 1) // 2
    # (index - ab/T) / ((a+b)/2 - ab/T), scaled by 2T so only the last step is inexact
    num = 2 * total * index - 2 * a * b
    den = total * (a + b) - 2 * a * b
    if den == 0:
        return 1.0
    return num / den


def pairwise_fscore(pred, truth) -> float:
    """F1 of same-cluster pair co-membership."""
    table = contingency(pred, truth)
    if table.sum() < 2:
        raise ValueError("pairwise_fscore needs at least two samples")
    both = int(_comb2(table).sum())
    same_pred = int(_comb2(table.sum(axis=1)).sum())
    same_true = int(_comb2(table.sum(axis=0)).sum())
    if same_pred == 0 or same_true == 0 or both == 0:
        return 0.0
    return 2.0 * both / (same_pred + same_true)


def score(pred, truth) -> MetricsReport:
    return MetricsReport(
        hungarian_accuracy(pred, truth), nmi(pred, truth), ari(pred, truth), pairwise_fscore(pred, truth)
    )


def evaluate(f, truth, k: int, restarts: int = 10, seed: int = 0) -> MetricsReport:
    if truth is None:
        raise ValueError("evaluate needs ground-truth labels")
    return score(kmeans(f, k, restarts=restarts, seed=seed), truth)
