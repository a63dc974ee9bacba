"""Adaptive-neighbour (CAN) similarity graphs.

Each row i keeps its k nearest other samples and weights them by

    p_ij = (d_{i,k+1} - d_ij) / (k d_{i,k+1} - sum_{l<=k} d_il)

with d the sorted squared distances.  This is the closed-form minimiser of
``sum_j d_ij p_ij + alpha p_ij^2`` over the probability simplex.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
import scipy.sparse as sp

from . import diffmath as dm
from .errors import GraphError, NonFiniteError

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class Graph:
    """Row-stochastic sparse N×N similarity graph (self edges never stored)."""

    matrix: sp.csr_matrix
    k: int

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def row(self, i):
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def check(self, tol: float = 1e-10) -> None:
        m = self.matrix
        if np.any(m.data < 0):
            raise GraphError("graph has negative weights")
        if np.any(np.diff(m.indptr) > self.k):
            raise GraphError(f"a row has more than k={self.k} entries")
        if np.any(m.diagonal() != 0):
            raise GraphError("graph stores a self edge")
        sums = np.asarray(m.sum(axis=1)).ravel()
        if np.any(np.abs(sums - 1.0) > tol):
            raise GraphError(f"rows not stochastic (max dev {np.abs(sums - 1).max():.2e})")


class Ranking(NamedTuple):
    """Frozen neighbour choice: k nearest per row, the (k+1)-th, degenerate flags."""

    neighbors: np.ndarray  # (N, k) int
    kth: np.ndarray  # (N,) int, index of the (k+1)-th nearest
    degenerate: np.ndarray  # (N,) bool


def _check_k(n: int, k: int) -> None:
    if not 1 <= k <= n - 2:
        raise GraphError(f"k_neighbors must lie in [1, N-2] = [1, {n - 2}], got {k}")


def rank_neighbors(dists: np.ndarray, k: int) -> Ranking:
    """Pick the k+1 nearest other samples per row (stable order on ties)."""
    n = dists.shape[0]
    _check_k(n, k)
    masked = dists.copy()
    np.fill_diagonal(masked, np.inf)
    rows = np.arange(n)[:, None]
    cand = np.argpartition(masked, k, axis=1)[:, : k + 1]
    # order the k+1 candidates by (distance, index) so ties resolve deterministically
    key = np.lexsort((cand, masked[rows, cand]), axis=1)
    order = cand[rows, key]
    d_sorted = masked[rows, order]
    denom = k * d_sorted[:, k] - d_sorted[:, :k].sum(axis=1)
    return Ranking(order[:, :k].copy(), order[:, k].copy(), denom < DEGENERATE_TOL)


def _weights_from_ranking(dists: np.ndarray, ranking: Ranking, k: int) -> np.ndarray:
    n = dists.shape[0]
    rows = np.arange(n)[:, None]
    d_nb = dists[rows, ranking.neighbors]
    d_k1 = dists[np.arange(n), ranking.kth][:, None]
    denom = k * d_k1 - d_nb.sum(axis=1, keepdims=True)
    safe = np.where(ranking.degenerate[:, None], 1.0, denom)
    w = (d_k1 - d_nb) / safe
    return np.where(ranking.degenerate[:, None], 1.0 / k, w)


def _dense_from_weights(n: int, ranking: Ranking, w: np.ndarray) -> np.ndarray:
    out = np.zeros((n, n))
    out[np.arange(n)[:, None], ranking.neighbors] = w
    return out


def can_graph(X, k: int) -> Graph:
    """Closed-form CAN graph of the rows of ``X``."""
    X = dm.as_matrix(X)
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("can_graph: features contain NaN/Inf")
    n = X.shape[0]
    _check_k(n, k)
    dists = dm.pairwise_sq_dists(dm.const(X)).value
    ranking = rank_neighbors(dists, k)
    w = _weights_from_ranking(dists, ranking, k)
    mat = sp.csr_matrix(_dense_from_weights(n, ranking, w))
    mat.eliminate_zeros()
    return Graph(mat, k)


def _simplex_qp_row(d: np.ndarray, alpha: float) -> np.ndarray:
    """argmin_p sum d_j p_j + alpha p_j^2 on the simplex, via its KKT multiplier.

    Stationarity gives p_j = max(0, (eta - d_j) / (2 alpha)); eta is bracketed
    and bisected on the monotone constraint residual, then solved exactly on
    the identified support.
    """
    lo, hi = d.min(), d.min() + 2.0 * alpha
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(0.0, (mid - d) / (2.0 * alpha)).sum() < 1.0:
            lo = mid
        else:
            hi = mid
    eta = 0.5 * (lo + hi)
    support = d < eta
    while True:
        eta = (2.0 * alpha + d[support].sum()) / support.sum()
        # drop entries whose exact weight is zero up to roundoff (the boundary neighbour)
        weak = support & (eta - d <= 1e-12 * max(1.0, abs(eta)))
        if not weak.any() or weak.sum() == support.sum():
            break
        support &= ~weak
    p = np.where(support, (eta - d) / (2.0 * alpha), 0.0)
    return np.maximum(p, 0.0)


def can_graph_oracle(X, k: int) -> Graph:
    """Per-row QP solve of the adaptive-neighbour objective (test oracle).

    alpha_i is chosen as (k d_{i,k+1} - sum_{j<=k} d_ij) / 2, the value at
    which the minimiser has exactly k nonzeros.
    """
    X = dm.as_matrix(X)
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("can_graph_oracle: features contain NaN/Inf")
    n = X.shape[0]
    _check_k(n, k)
    if n > 200:
        raise GraphError("can_graph_oracle is a test oracle limited to N <= 200")
    dense = np.zeros((n, n))
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        d = np.array([np.sum((X[i] - X[j]) ** 2) for j in others])
        srt = np.sort(d)
        alpha = 0.5 * (k * srt[k] - srt[:k].sum())
        if alpha < DEGENERATE_TOL / 2:
            p = np.zeros_like(d)
            p[np.argsort(d, kind="stable")[:k]] = 1.0 / k
        else:
            p = _simplex_qp_row(d, alpha)
        dense[i, others] = p
    mat = sp.csr_matrix(dense)
    mat.eliminate_zeros()
    return Graph(mat, k)


def fuse_graphs(g_view: Graph, g_joint: Graph) -> Graph:
    """Entrywise average of a view graph and the joint graph."""
    if g_view.n != g_joint.n:
        raise GraphError(f"fuse_graphs: N differs ({g_view.n} vs {g_joint.n})")
    mat = ((g_view.matrix + g_joint.matrix) * 0.5).tocsr()
    mat.sort_indices()
    return Graph(mat, g_view.k + g_joint.k)


def can_weights(dist_node: dm.Node, ranking: Ranking, k: int) -> dm.Node:
    """Dense CAN graph as a differentiable function of the distance matrix.

    The ranking (support and degenerate flags) is treated as a constant.
    """
    dv = dist_node.value
    n = dv.shape[0]
    rows = np.arange(n)
    d_nb = dv[rows[:, None], ranking.neighbors]
    d_k1 = dv[rows, ranking.kth]
    denom = k * d_k1 - d_nb.sum(axis=1)
    live = ~ranking.degenerate
    safe = np.where(live, denom, 1.0)
    w = _weights_from_ranking(dv, ranking, k)
    value = _dense_from_weights(n, ranking, w)

    def vjp(g):
        g_nb = g[rows[:, None], ranking.neighbors]
        # dp_ij/dd_{i,k+1} = (1 - k p_ij)/denom ; dp_ij/dd_il = (p_ij - [j=l])/denom
        g_k1 = np.sum(g_nb * (1.0 - k * w), axis=1) / safe
        g_l = (np.sum(g_nb * w, axis=1, keepdims=True) - g_nb) / safe[:, None]
        g_k1 = np.where(live, g_k1, 0.0)
        g_l = np.where(live[:, None], g_l, 0.0)
        out = np.zeros_like(dv)
        out[rows[:, None], ranking.neighbors] += g_l
        out[rows, ranking.kth] += g_k1
        return (out,)

    return dm._make("can_weights", value, (dist_node,), vjp)


def joint_graph_node(f_node: dm.Node, k: int, ranking: Optional[Ranking] = None):
    """Differentiable dense CAN graph of the joint features.

    Returns ``(graph_node, ranking)``; the ranking is computed from the current
    values unless one is passed in.
    """
    if not np.all(np.isfinite(f_node.value)):
        raise NonFiniteError("joint_graph_node: features contain NaN/Inf")
    _check_k(f_node.shape[0], k)
    dist = dm.pairwise_sq_dists(f_node)
    if ranking is None:
        ranking = rank_neighbors(dist.value, k)
    return can_weights(dist, ranking, k), ranking


def save_graph(graph: Graph, path: Union[str, Path]) -> None:
    """Write space-separated ``row col weight`` triples (17 significant digits), one per line."""
    coo = graph.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"# n={graph.n} k={graph.k}\n")
        for t in order:
            fh.write(f"{coo.row[t]} {coo.col[t]} {coo.data[t]:.17g}\n")


def load_graph(path: Union[str, Path]) -> Graph:
    rows, cols, vals = [], [], []
    n = k = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                meta = dict(tok.split("=") for tok in line[1:].split())
                n, k = int(meta["n"]), int(meta["k"])
                continue
            r, c, w = line.split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(w))
    if n is None:
        raise GraphError(f"{path}: missing '# n=.. k=..' header")
    return Graph(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)), k)
