"""Full-batch Adam training of the BMvC network."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import diffmath as dm
from . import graph as gr
from . import loss as ls
from .data import ViewDataset
from .errors import DataError, NonFiniteError, RankDeficiencyError, TrainingError
from .model import (
    FusionMode, ModelParams, cluster_indicators, decode, encode, fuse_features,
    init_params, reinit_projection, save_checkpoint,
)

log = logging.getLogger(__name__)

MAX_QR_RETRIES = 3


@dataclass
class TrainConfig:
    n_clusters: int
    lam: float = 10.0
    learning_rate: float = 1e-3
    epochs: int = 3000
    k_neighbors: int = 10
    fusion: FusionMode = FusionMode.CAT
    mode: ls.Mode = ls.Mode.REC_VCR
    graph_refresh_interval: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.fusion = FusionMode(self.fusion)
        self.mode = ls.Mode(self.mode)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.graph_refresh_interval < 1:
            raise ValueError("graph_refresh_interval must be >= 1")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.n_clusters < 2:
            raise ValueError(f"n_clusters must be >= 2, got {self.n_clusters}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        d["mode"] = self.mode.value
        return d


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: ls.LossBreakdown
    gnorm_rec: List[float]
    gnorm_vcr: List[float]
    seconds: float


@dataclass
class TrainHistory:
    n_views: int
    records: List[EpochRecord] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([_flatten(r, self.n_views)[name] for r in self.records])


def _flatten(rec: EpochRecord, m: int) -> dict:
    row = {"epoch": rec.epoch, "total": rec.loss.total}
    for r in range(m):
        row[f"rec_{r + 1}"] = rec.loss.rec[r]
    for r in range(m):
        row[f"vcr_{r + 1}"] = rec.loss.vcr[r]
    for r in range(m):
        row[f"gnorm_rec_{r + 1}"] = rec.gnorm_rec[r]
    for r in range(m):
        row[f"gnorm_vcr_{r + 1}"] = rec.gnorm_vcr[r]
    row["seconds"] = rec.seconds
    return row


def write_history(history: TrainHistory, path, zero_seconds: bool = False) -> None:
    """CSV: epoch,total,rec_<r>..,vcr_<r>..,gnorm_rec_<r>..,gnorm_vcr_<r>..,seconds.

    ``zero_seconds`` blanks the wall-clock column so reruns compare byte-for-byte.
    """
    m = history.n_views
    header = (["epoch", "total"] + [f"rec_{r + 1}" for r in range(m)] + [f"vcr_{r + 1}" for r in range(m)]
              + [f"gnorm_rec_{r + 1}" for r in range(m)] + [f"gnorm_vcr_{r + 1}" for r in range(m)] + ["seconds"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rec in history.records:
            row = _flatten(rec, m)
            if zero_seconds:
                row["seconds"] = 0.0
            w.writerow([row["epoch"]] + [repr(float(row[h])) for h in header[1:]])


def adam_step(arrays: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              t: int, config: TrainConfig, epoch: Optional[int] = None):
    """One bias-corrected Adam update; returns ``(new_arrays, new_state)``."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.adam_eps
    new_arrays, m_new, v_new = {}, {}, {}
    for name, theta in arrays.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if not np.all(np.isfinite(g)):
            where = f" at epoch {epoch}" if epoch is not None else ""
            raise TrainingError(f"non-finite gradient for {name}{where}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_arrays[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_arrays, AdamState(m_new, v_new, t)


class ForwardResult(NamedTuple):
    zs: List[dm.Node]
    f: dm.Node
    joint_graph: Optional[dm.Node]
    ranking: Optional[gr.Ranking]
    parts: ls.LossParts


def view_graphs(ds: ViewDataset, k: int) -> List[np.ndarray]:
    """Dense CAN graphs of the raw views (constants during training)."""
    return [gr.can_graph(x, k).to_dense() for x in ds.views]


def forward_pass(leaves, ds: ViewDataset, graphs: Sequence[np.ndarray], config: TrainConfig,
                 ranking: Optional[gr.Ranking] = None, joint_const: Optional[np.ndarray] = None,
                 mode: Optional[ls.Mode] = None) -> ForwardResult:
    """Build the loss graph for the current parameters.

    With ``joint_const`` given, the joint graph is that constant; otherwise it
    is rebuilt differentiably from F (using ``ranking`` if supplied).
    """
    mode = ls.Mode(mode or config.mode)
    zs = [encode(leaves, x, r) for r, x in enumerate(ds.views)]
    f = fuse_features(leaves, zs, config.fusion)
    rec_terms = []
    if mode.uses_rec:
        rec_terms = [ls.reconstruction_loss(decode(leaves, f, r), x) for r, x in enumerate(ds.views)]
    vcr_terms, g_joint = [], None
    if mode.uses_vcr:
        if joint_const is not None:
            g_joint = dm.const(joint_const)
        else:
            g_joint, ranking = gr.joint_graph_node(f, config.k_neighbors, ranking)
        for s, z in enumerate(zs):
            g_hat = dm.weighted_sum([dm.const(graphs[s]), g_joint], [0.5, 0.5])
            try:
                c = cluster_indicators(leaves, z, s)
            except RankDeficiencyError as exc:
                exc.view = s
                raise
            vcr_terms.append(ls.vcr_loss(c, g_hat))
    if not rec_terms:
        rec_terms = [dm.const(0.0)] * len(zs)
    if not vcr_terms:
        vcr_terms = [dm.const(0.0)] * len(zs)
    parts = ls.total_loss(rec_terms, vcr_terms, config.lam, mode)
    return ForwardResult(zs, f, g_joint, ranking, parts)


def _named(grads: Dict[dm.Node, np.ndarray]) -> Dict[str, np.ndarray]:
    return {node.name: g for node, g in grads.items()}


def per_view_grad_norms(parts: ls.LossParts, params: ModelParams, lam: float):
    """Encoder gradient norms per view for the reconstruction and (λ-scaled) VCR paths.

    Two backward passes share the forward graph.  Returns
    ``(rec_norms, vcr_norms, rec_grads, vcr_grads)``; ``vcr_grads`` is unscaled.
    """
    rec_grads = _named(dm.backward(parts.rec_sum)) if parts.rec_sum is not None else {}
    vcr_grads = _named(dm.backward(parts.vcr_sum)) if parts.vcr_sum is not None else {}

    def norm(grads, r):
        return float(np.sqrt(sum(np.sum(grads[n] ** 2) for n in params.encoder_names(r) if n in grads)))

    m = params.n_views
    rec_norms = [norm(rec_grads, r) for r in range(m)]
    vcr_norms = [lam * norm(vcr_grads, r) for r in range(m)]
    return rec_norms, vcr_norms, rec_grads, vcr_grads


def combine_grads(rec_grads, vcr_grads, lam: float, mode: ls.Mode) -> Dict[str, np.ndarray]:
    out = {}
    if mode.uses_rec:
        out.update({k: v.copy() for k, v in rec_grads.items()})
    if mode.uses_vcr:
        for k, v in vcr_grads.items():
            out[k] = out[k] + lam * v if k in out else lam * v
    return out


def _check_scaled(ds: ViewDataset) -> None:
    for name, v in zip(ds.view_names, ds.views):
        if v.min() < -1e-12 or v.max() > 1 + 1e-12:
            raise DataError(f"view {name!r} is not scaled to [0, 1]; apply minmax_scale first")


def train(ds: ViewDataset, config: TrainConfig, checkpoint_path=None, checkpoint_every: int = 0,
          params: Optional[ModelParams] = None):
    """Train on all samples every step; returns ``(params, history)``."""
    _check_scaled(ds)
    if ds.n_samples < config.n_clusters:
        raise DataError(f"N={ds.n_samples} < n_clusters={config.n_clusters}")
    if params is None:
        params = init_params(ds.dims, config.n_clusters, config.fusion, config.seed)
    graphs = view_graphs(ds, config.k_neighbors) if config.mode.uses_vcr else []
    state = AdamState()
    history = TrainHistory(ds.n_views)
    joint_cache = None
    retries = 0
    epoch = 1
    while epoch <= config.epochs:
        started = time.perf_counter()
        refresh = (epoch - 1) % config.graph_refresh_interval == 0
        leaves = params.bind()
        try:
            fw = forward_pass(leaves, ds, graphs, config, joint_const=None if refresh else joint_cache)
        except RankDeficiencyError as exc:
            retries += 1
            if retries > MAX_QR_RETRIES:
                raise TrainingError(f"epoch {epoch}: QR kept failing after {MAX_QR_RETRIES} retries: {exc}") from exc
            view = getattr(exc, "view", 0)
            log.warning("epoch %d: rank-deficient projection for view %d, re-initialising", epoch, view + 1)
            reinit_projection(params, view, config.seed + 7919 * retries + view)
            continue
        except NonFiniteError as exc:
            raise TrainingError(f"epoch {epoch}: non-finite value in forward pass: {exc}") from exc
        if refresh and fw.joint_graph is not None:
            joint_cache = fw.joint_graph.value
        total = fw.parts.breakdown.total
        if not np.isfinite(total):
            raise TrainingError(f"epoch {epoch}: non-finite loss {fw.parts.breakdown}")
        rec_n, vcr_n, g_rec, g_vcr = per_view_grad_norms(fw.parts, params, config.lam)
        grads = combine_grads(g_rec, g_vcr, config.lam, config.mode)
        params.arrays, state = adam_step(params.arrays, grads, state, state.t + 1, config, epoch)
        history.records.append(EpochRecord(epoch, fw.parts.breakdown, rec_n, vcr_n, time.perf_counter() - started))
        if epoch % 100 == 0 or epoch == 1:
            log.info("epoch %d total=%.6g", epoch, total)
        if checkpoint_path and checkpoint_every and epoch % checkpoint_every == 0 and epoch < config.epochs:
            p = Path(checkpoint_path)
            save_checkpoint(params, p.with_name(f"{p.stem}_epoch{epoch}{p.suffix}"))
        epoch += 1
    if checkpoint_path:
        save_checkpoint(params, checkpoint_path)
    return params, history


def embed(params: ModelParams, ds: ViewDataset, fusion=None):
    """Numeric view latents Z^r and joint features F at the current parameters."""
    leaves = params.bind()
    zs = [encode(leaves, x, r) for r, x in enumerate(ds.views)]
    f = fuse_features(leaves, zs, fusion or params.fusion)
    return [z.value for z in zs], f.value


def per_view_vcr_values(params: ModelParams, ds: ViewDataset, config: TrainConfig) -> List[float]:
    """VCR value of every view at the current parameters (no gradient step)."""
    graphs = view_graphs(ds, config.k_neighbors)
    fw = forward_pass(params.bind(), ds, graphs, config, mode=ls.Mode.VCR)
    return list(fw.parts.breakdown.vcr)
