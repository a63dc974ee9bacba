"""Reconstruction loss, weighted view-specific contrastive regularisation, total objective."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from . import diffmath as dm
from .errors import GraphError, ShapeError

DENOM_TOL = 1e-12


class Mode(str, Enum):
    REC = "rec"
    VCR = "vcr"
    REC_VCR = "rec+vcr"

    @property
    def uses_rec(self) -> bool:
        return self is not Mode.VCR

    @property
    def uses_vcr(self) -> bool:
        return self is not Mode.REC


@dataclass
class LossBreakdown:
    total: float
    rec: List[float]
    vcr: List[float]
    lam: float


class LossParts(NamedTuple):
    total: dm.Node
    rec_sum: Optional[dm.Node]
    vcr_sum: Optional[dm.Node]
    breakdown: LossBreakdown


def reconstruction_loss(x_hat: dm.Node, x) -> dm.Node:
    """Mean squared error over all N·D entries."""
    x = x if isinstance(x, dm.Node) else dm.const(x)
    if x_hat.shape != x.shape:
        raise ShapeError(f"reconstruction_loss: {x_hat.shape} vs {x.shape}")
    return dm.mean(dm.square(dm.weighted_sum([x_hat, x], [1.0, -1.0])))


def vcr_loss(c: dm.Node, g_hat) -> dm.Node:
    """Weighted contrastive alignment of indicator cosines with a fused graph.

    Both sums and both normalisers run over off-diagonal pairs only.  An
    empty positive mass is an error; an empty negative mass drops that term.
    """
    g = g_hat if isinstance(g_hat, dm.Node) else dm.const(g_hat)
    n = c.shape[0]
    if n < 2 or g.shape != (n, n):
        raise ShapeError(f"vcr_loss: indicators {c.shape} vs graph {g.shape}")
    a = dm.cosine_similarity_matrix(c)
    off = dm.const(1.0 - np.eye(n))
    ones = dm.const(np.ones((n, n)))
    one_minus_a = dm.weighted_sum([ones, a], [1.0, -1.0])
    one_minus_g = dm.weighted_sum([ones, g], [1.0, -1.0])
    pos_den = dm.total(dm.mul(off, g))
    neg_den = dm.total(dm.mul(off, one_minus_g))
    if pos_den.value[0, 0] < DENOM_TOL:
        raise GraphError("vcr_loss: graph has (near) empty positive mass")
    pos = dm.total(dm.mul(off, dm.square(dm.mul(g, one_minus_a))))
    if neg_den.value[0, 0] < DENOM_TOL:
        # every off-diagonal weight is 1, so the negative numerator vanishes identically
        return dm.div(pos, pos_den)
    neg = dm.total(dm.mul(off, dm.square(dm.mul(one_minus_g, a))))
    return dm.weighted_sum([dm.div(pos, pos_den), dm.div(neg, neg_den)], [1.0, 1.0])


def vcr_trace_form(a: np.ndarray, g: np.ndarray) -> float:
    """Same objective written with traces, Tr(P P) / sum(g) + Tr(Q Q) / sum(1-g).

    Agrees with :func:`vcr_loss` only when ``a`` and ``g`` are symmetric,
    because Tr(P^2) = ||P||_F^2 needs P = P^T.
    """
    n = a.shape[0]
    off = 1.0 - np.eye(n)
    p = off * g * (1.0 - a)
    q = off * (1.0 - g) * a
    return float(np.trace(p @ p) / np.sum(off * g) + np.trace(q @ q) / np.sum(off * (1.0 - g)))


def total_loss(rec_terms: Sequence[dm.Node], vcr_terms: Sequence[dm.Node], lam: float, mode="rec+vcr") -> LossParts:
    """Sum of reconstruction terms plus ``lam`` times the VCR terms, per ablation mode."""
    mode = Mode(mode)
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    parts, weights = [], []
    rec_sum = vcr_sum = None
    m = max(len(rec_terms), len(vcr_terms))
    rec_vals = [0.0] * m
    vcr_vals = [0.0] * m
    if mode.uses_rec:
        rec_sum = dm.weighted_sum(rec_terms, [1.0] * len(rec_terms))
        rec_vals = [float(t.value[0, 0]) for t in rec_terms]
        parts.append(rec_sum)
        weights.append(1.0)
    if mode.uses_vcr:
        vcr_sum = dm.weighted_sum(vcr_terms, [1.0] * len(vcr_terms))
        vcr_vals = [float(t.value[0, 0]) for t in vcr_terms]
        parts.append(vcr_sum)
        weights.append(lam)
    total = dm.weighted_sum(parts, weights)
    return LossParts(total, rec_sum, vcr_sum, LossBreakdown(float(total.value[0, 0]), rec_vals, vcr_vals, float(lam)))
