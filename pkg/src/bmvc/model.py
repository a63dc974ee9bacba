"""View-specific autoencoders, feature fusion and clustering projection heads."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import numpy as np

from . import diffmath as dm
from .errors import ShapeError

ENCODER_HIDDEN = (196, 128)
LATENT_DIM = 64
DECODER_HIDDEN = (128, 196)

CHECKPOINT_MAGIC = b"BMVC"
CHECKPOINT_VERSION = 1


class FusionMode(str, Enum):
    CAT = "cat"
    ASUM = "asum"
    WSUM = "wsum"


_FUSION_CODES = {FusionMode.CAT: 0, FusionMode.ASUM: 1, FusionMode.WSUM: 2}


def _layer_sizes(dims: Sequence[int], n_clusters: int, fusion: FusionMode):
    """(name, shape) for every parameter, in declaration order."""
    spec = []
    for r, d in enumerate(dims):
        sizes = (d,) + ENCODER_HIDDEN + (LATENT_DIM,)
        for i in range(3):
            spec.append((f"enc{r}.W{i + 1}", (sizes[i], sizes[i + 1])))
            spec.append((f"enc{r}.b{i + 1}", (1, sizes[i + 1])))
        sizes = (LATENT_DIM,) + DECODER_HIDDEN + (d,)
        for i in range(3):
            spec.append((f"dec{r}.W{i + 1}", (sizes[i], sizes[i + 1])))
            spec.append((f"dec{r}.b{i + 1}", (1, sizes[i + 1])))
    m = len(dims)
    if fusion is FusionMode.CAT:
        spec.append(("fuse.W", (m * LATENT_DIM, LATENT_DIM)))
        spec.append(("fuse.b", (1, LATENT_DIM)))
    elif fusion is FusionMode.WSUM:
        for r in range(m):
            spec.append((f"fuse.score{r}.w", (LATENT_DIM, 1)))
            spec.append((f"fuse.score{r}.b", (1, 1)))
    for r in range(m):
        spec.append((f"proj{r}.W", (LATENT_DIM, n_clusters)))
    return spec


def _glorot(rng, shape):
    a = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-a, a, size=shape)


@dataclass
class ModelParams:
    dims: List[int]
    n_clusters: int
    fusion: FusionMode
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.dims)

    def bind(self) -> Dict[str, dm.Node]:
        """Fresh trainable leaf nodes for one forward/backward pass."""
        return {name: dm.Node(arr, name=name) for name, arr in self.arrays.items()}

    def encoder_names(self, r: int) -> List[str]:
        return [n for n in self.arrays if n.startswith(f"enc{r}.")]

    def copy(self) -> "ModelParams":
        return ModelParams(list(self.dims), self.n_clusters, self.fusion,
                           {k: v.copy() for k, v in self.arrays.items()})


def init_params(dims: Sequence[int], n_clusters: int, mode="cat", seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic for a given seed."""
    dims = [int(d) for d in dims]
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"every view dimension must be >= 1, got {dims}")
    if n_clusters < 2:
        raise ValueError(f"n_clusters must be >= 2, got {n_clusters}")
    fusion = FusionMode(mode)
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _layer_sizes(dims, n_clusters, fusion):
        is_bias = name.rsplit(".", 1)[1].startswith("b")
        arrays[name] = np.zeros(shape) if is_bias else _glorot(rng, shape)
    return ModelParams(dims, n_clusters, fusion, arrays)


def reinit_projection(params: ModelParams, view: int, seed: int) -> None:
    name = f"proj{view}.W"
    params.arrays[name] = _glorot(np.random.default_rng(seed), params.arrays[name].shape)


def _mlp(p: Mapping[str, dm.Node], prefix: str, x: dm.Node) -> dm.Node:
    h = x
    for i in (1, 2, 3):
        h = dm.affine(h, p[f"{prefix}.W{i}"], p[f"{prefix}.b{i}"])
        if i < 3:
            h = dm.relu(h)
    return h


def encode(p: Mapping[str, dm.Node], x, r: int) -> dm.Node:
    x = x if isinstance(x, dm.Node) else dm.const(x)
    expected = p[f"enc{r}.W1"].shape[0]
    if x.shape[1] != expected:
        raise ShapeError(f"encode: view {r} expects {expected} columns, got {x.shape[1]}")
    return _mlp(p, f"enc{r}", x)


def fuse_features(p: Mapping[str, dm.Node], zs: Sequence[dm.Node], mode) -> dm.Node:
    mode = FusionMode(mode)
    if not zs or any(z.shape[1] != LATENT_DIM or z.shape[0] != zs[0].shape[0] for z in zs):
        raise ShapeError(f"fuse_features: expected N×{LATENT_DIM} inputs, got {[z.shape for z in zs]}")
    if mode is FusionMode.CAT:
        return dm.affine(dm.concat(zs), p["fuse.W"], p["fuse.b"])
    if mode is FusionMode.ASUM:
        return dm.weighted_sum(zs, [1.0 / len(zs)] * len(zs))
    weights = fusion_weights(p, zs)
    parts = [dm.mul(dm.col_slice(weights, r, r + 1), z) for r, z in enumerate(zs)]
    return dm.weighted_sum(parts, [1.0] * len(parts))


def fusion_weights(p: Mapping[str, dm.Node], zs: Sequence[dm.Node]) -> dm.Node:
    """Per-sample softmax weights over views (wsum fusion), N×M."""
    scores = [dm.affine(z, p[f"fuse.score{r}.w"], p[f"fuse.score{r}.b"]) for r, z in enumerate(zs)]
    return dm.softmax_rows(dm.concat(scores))


def decode(p: Mapping[str, dm.Node], f: dm.Node, r: int) -> dm.Node:
    if f.shape[1] != LATENT_DIM:
        raise ShapeError(f"decode: expected N×{LATENT_DIM} joint features, got {f.shape}")
    return _mlp(p, f"dec{r}", f)


def cluster_indicators(p: Mapping[str, dm.Node], z: dm.Node, s: int) -> dm.Node:
    w = p[f"proj{s}.W"]
    if z.shape[0] < w.shape[1]:
        raise ShapeError(f"cluster_indicators: N={z.shape[0]} < n_clusters={w.shape[1]}")
    return dm.qr_orthonormalize(dm.matmul(z, w))


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> None:
    """Header ``BMVC``, version, M, n_clusters, fusion code, dims; then float64 LE params."""
    header = struct.pack(
        f"<4sIIII{params.n_views}I", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        params.n_views, params.n_clusters, _FUSION_CODES[params.fusion], *params.dims,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name, _ in _layer_sizes(params.dims, params.n_clusters, params.fusion):
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    blob = Path(path).read_bytes()
    magic, version, m, n_clusters, code = struct.unpack_from("<4sIIII", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a BMVC checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = struct.calcsize("<4sIIII")
    dims = list(struct.unpack_from(f"<{m}I", blob, offset))
    offset += 4 * m
    fusion = {v: k for k, v in _FUSION_CODES.items()}[code]
    arrays = {}
    for name, shape in _layer_sizes(dims, n_clusters, fusion):
        count = shape[0] * shape[1]
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelParams(dims, n_clusters, fusion, arrays)
