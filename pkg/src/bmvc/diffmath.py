"""Dense float64 kernels and a small reverse-mode differentiation engine.

Evaluation is eager: every op computes its value when the node is built, so
``forward(node)`` only hands back ``node.value``.  Each op node stores a closure
mapping the upstream gradient to one gradient per parent.  Only the op-kinds
the BMvC objective needs are provided.
"""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NonFiniteError, RankDeficiencyError, ShapeError

COSINE_EPS = 1e-12
QR_RANK_TOL = 1e-10


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D C-contiguous float64 array."""
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {arr.ndim} dimensions")
    return np.ascontiguousarray(arr)


class Node:
    """A value in the computation graph.

    Leaves are created with :func:`param` (trainable) or :func:`const`.  Op
    nodes are constant exactly when every parent is constant, so gradients are
    never routed into constant subgraphs.
    """

    __slots__ = ("value", "op", "parents", "constant", "grad", "name", "_vjp")

    def __init__(self, value, op="leaf", parents=(), vjp=None, constant=False, name=None):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self._vjp = vjp
        self.constant = constant
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape}, constant={self.constant})"


def param(value, name=None) -> Node:
    return Node(as_matrix(value), name=name)


def const(value, name=None) -> Node:
    return Node(as_matrix(value), constant=True, name=name)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(op: str, value: np.ndarray, parents: Sequence[Node], vjp) -> Node:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced a non-finite value")
    constant = all(p.constant for p in parents)
    return Node(value, op, parents, None if constant else vjp, constant)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcastable(a, b) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# op-kinds


def affine(x: Node, W: Node, b: Node) -> Node:
    """``x @ W + b`` with ``b`` a 1×out row."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    if x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise ShapeError(f"affine: x{x.shape} @ W{W.shape} + b{b.shape}")
    xv, Wv = x.value, W.value
    x_const = x.constant

    def vjp(g):
        gx = None if x_const else g @ Wv.T
        return gx, xv.T @ g, g.sum(axis=0, keepdims=True)

    return _make("affine", xv @ Wv + b.value, (x, W, b), vjp)


def relu(x: Node) -> Node:
    x = _lift(x)
    mask = x.value > 0
    return _make("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def concat(nodes: Sequence[Node]) -> Node:
    """Horizontal concatenation (along columns)."""
    nodes = [_lift(n) for n in nodes]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"concat: row counts differ {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _make("concat", np.hstack([n.value for n in nodes]), nodes, vjp)


def row_slice(x: Node, rows) -> Node:
    """Select rows by index array or slice."""
    x = _lift(x)
    idx = np.arange(x.shape[0])[rows]
    if idx.ndim != 1:
        raise ShapeError("row_slice: rows must select a 1-D set of indices")

    def vjp(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make("row_slice", x.value[idx], (x,), vjp)


def col_slice(x: Node, start: int, stop: int) -> Node:
    x = _lift(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"col_slice: [{start}:{stop}] outside {x.shape[1]} columns")

    def vjp(g):
        out = np.zeros_like(x.value)
        out[:, start:stop] = g
        return (out,)

    return _make("col_slice", x.value[:, start:stop], (x,), vjp)


def weighted_sum(nodes: Sequence[Node], weights: Sequence[float]) -> Node:
    """``sum_i weights[i] * nodes[i]`` for same-shape operands and real weights."""
    nodes = [_lift(n) for n in nodes]
    weights = [float(w) for w in weights]
    if len(nodes) != len(weights) or not nodes:
        raise ShapeError("weighted_sum: need one weight per operand")
    shape = nodes[0].shape
    if any(n.shape != shape for n in nodes):
        raise ShapeError(f"weighted_sum: shapes differ {[n.shape for n in nodes]}")
    value = np.zeros(shape)
    for n, w in zip(nodes, weights):
        value = value + w * n.value
    return _make("weighted_sum", value, nodes, lambda g: tuple(w * g for w in weights))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product with numpy broadcasting of size-1 axes."""
    a, b = _lift(a), _lift(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    a_const, b_const = a.constant, b.constant

    def vjp(g):
        ga = None if a_const else _unbroadcast(g * bv, av.shape)
        gb = None if b_const else _unbroadcast(g * av, bv.shape)
        return ga, gb

    return _make("mul", av * bv, (a, b), vjp)


def square(x: Node) -> Node:
    x = _lift(x)
    xv = x.value
    return _make("square", xv * xv, (x,), lambda g: (2.0 * xv * g,))


def matmul(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def row_normalize(x: Node, eps: float = COSINE_EPS) -> Node:
    """Scale every row to unit L2 norm: ``x_i / (||x_i|| + eps)``."""
    x = _lift(x)
    xv = x.value
    norms = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
    denom = norms + eps
    out = xv / denom

    def vjp(g):
        # d/dx of x/(|x|+eps): g/denom - x * <g, x> / (|x| * denom^2)
        dot = np.sum(g * xv, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        return (g / denom - xv * dot / (safe * denom * denom),)

    return _make("row_normalize", out, (x,), vjp)


def pairwise_sq_dists(x: Node) -> Node:
    """N×N matrix of squared Euclidean distances between rows, clamped at 0."""
    x = _lift(x)
    xv = x.value
    if xv.shape[0] < 2:
        raise ShapeError("pairwise_sq_dists: need at least two rows")
    sq = np.sum(xv * xv, axis=1)
    raw = sq[:, None] + sq[None, :] - 2.0 * (xv @ xv.T)
    raw = 0.5 * (raw + raw.T)
    np.fill_diagonal(raw, 0.0)
    active = raw > 0
    value = np.where(active, raw, 0.0)

    def vjp(g):
        g = np.where(active, g, 0.0)
        gs = g + g.T
        return (2.0 * (np.sum(gs, axis=1, keepdims=True) * xv - gs @ xv),)

    return _make("pairwise_sq_dists", value, (x,), vjp)


def cosine_similarity_matrix(c: Node, eps: float = COSINE_EPS) -> Node:
    """``a_ij = <c_i, c_j> / (||c_i|| ||c_j|| + eps)``."""
    c = _lift(c)
    cv = c.value
    s = cv @ cv.T
    n = np.sqrt(np.sum(cv * cv, axis=1))
    u = 1.0 / (np.outer(n, n) + eps)
    value = s * u

    def vjp(g):
        gs = g * u
        h = -g * s * u * u
        gn = h @ n + h.T @ n
        safe = np.where(n > 0, n, 1.0)
        gc = (gs + gs.T) @ cv + np.where(n > 0, gn / safe, 0.0)[:, None] * cv
        return (gc,)

    return _make("cosine_similarity", value, (c,), vjp)


def qr_orthonormalize(m: Node, rank_tol: float = QR_RANK_TOL) -> Node:
    """Q factor of the thin QR of ``m`` with diag(R) > 0.

    Raises :class:`RankDeficiencyError` naming the first column whose
    |R_jj| <= rank_tol * max|R_ii|.
    """
    m = _lift(m)
    n_rows, k = m.shape
    if n_rows < k:
        raise ShapeError(f"qr_orthonormalize: need rows >= cols, got {m.shape}")
    q, r = np.linalg.qr(m.value, mode="reduced")
    diag = np.diag(r)
    mags = np.abs(diag)
    scale = mags.max() if k else 0.0
    bad = np.flatnonzero(mags <= rank_tol * scale) if scale > 0 else np.arange(k)
    if bad.size:
        j = int(bad[0])
        raise RankDeficiencyError(
            f"qr_orthonormalize: column {j} is numerically dependent "
            f"(|R_jj|={mags[j]:.3e}, max={scale:.3e})",
            column=j,
        )
    signs = np.sign(diag)
    q = q * signs[None, :]
    r = r * signs[:, None]

    def vjp(g):
        # thin-QR rule with no gradient on R:
        # dA = (dQ + Q copyltu(M)) R^{-T},  M = -dQ^T Q
        mm = -(g.T @ q)
        sym = np.tril(mm) + np.tril(mm, -1).T
        rhs = g + q @ sym
        return (solve_triangular(r, rhs.T, lower=False).T,)

    return _make("qr", q, (m,), vjp)


def softmax_rows(x: Node) -> Node:
    x = _lift(x)
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _make("softmax_rows", p, (x,), vjp)


def total(x: Node) -> Node:
    """Sum of all entries as a 1×1 node."""
    x = _lift(x)
    shape = x.shape
    return _make("sum", np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean(x: Node) -> Node:
    x = _lift(x)
    shape, count = x.shape, x.value.size
    return _make(
        "mean", np.array([[x.value.sum() / count]]), (x,),
        lambda g: (np.full(shape, g[0, 0] / count),),
    )


def div(x: Node, s: Node) -> Node:
    """Divide every entry of ``x`` by the 1×1 node ``s``."""
    x, s = _lift(x), _lift(s)
    if s.shape != (1, 1):
        raise ShapeError(f"div: divisor must be 1x1, got {s.shape}")
    sv = s.value[0, 0]
    if sv == 0.0:
        raise NonFiniteError("div: division by zero")
    xv = x.value
    out = xv / sv

    def vjp(g):
        return g / sv, np.array([[-np.sum(g * xv) / (sv * sv)]])

    return _make("div", out, (x, s), vjp)


# ---------------------------------------------------------------------------
# graph traversal


def forward(root: Node) -> np.ndarray:
    """Value of ``root``; ops evaluate eagerly so this is a lookup."""
    return root.value


def _topological(root: Node) -> list:
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise ValueError(f"backward: cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if not p.constant:
                pmark = state.get(id(p))
                if pmark == 1:
                    raise ValueError(f"backward: cycle detected at {p!r}")
                if pmark is None:
                    stack.append((p, False))
    return order


def backward(root: Node) -> Dict[Node, np.ndarray]:
    """Reverse-mode gradient of the 1×1 ``root`` w.r.t. every trainable leaf.

    Leaf ``.grad`` fields are overwritten with the result.
    """
    if root.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {root.shape}")
    grads: Dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    leaves = {}
    if root.constant:
        return {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if parent.constant or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def grad_check(
    loss_builder: Callable[[Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Compare reverse-mode gradients with central finite differences.

    Returns, per parameter, ``max |analytic - fd| / max(1, |fd|)``.  With
    ``max_entries`` set, only that many randomly chosen entries of each
    parameter are probed.
    """
    if not 0 < step <= 1e-2:
        raise ValueError(f"grad_check: step must lie in (0, 1e-2], got {step}")
    base = {name: as_matrix(v) for name, v in params.items()}

    def evaluate(values):
        out = loss_builder({name: param(v, name) for name, v in values.items()})
        val = out.value[0, 0]
        if not np.isfinite(val):
            raise NonFiniteError("grad_check: loss is non-finite at a probe point")
        return val

    leaves = {name: param(v, name) for name, v in base.items()}
    loss = loss_builder(leaves)
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("grad_check: loss is non-finite at the base point")
    backward(loss)
    rng = np.random.default_rng(seed)
    report = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        flat = np.arange(leaf.value.size)
        if max_entries is not None and flat.size > max_entries:
            flat = np.sort(rng.choice(flat, size=max_entries, replace=False))
        worst = 0.0
        for idx in flat:
            pos = np.unravel_index(idx, leaf.shape)
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][pos] += step
            minus[name][pos] -= step
            fd = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
            err = abs(analytic[pos] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
        report[name] = worst
    return report

