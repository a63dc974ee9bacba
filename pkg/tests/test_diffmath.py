import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bmvc import diffmath as dm
from bmvc.errors import NonFiniteError, RankDeficiencyError, ShapeError


def fd_gradient(fn, x, step=1e-5):
    """Central finite differences of scalar ``fn`` at ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (fn(xp) - fn(xm)) / (2 * step)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


# --- forward examples ------------------------------------------------------

def test_affine_identity():
    out = dm.affine(dm.const([[1, 2]]), dm.const(np.eye(2)), dm.const([[0, 0]]))
    assert np.array_equal(dm.forward(out), [[1, 2]])


def test_relu():
    assert np.array_equal(dm.relu(dm.const([[-1, 2]])).value, [[0, 2]])


def test_concat():
    assert np.array_equal(dm.concat([dm.const([[1]]), dm.const([[2, 3]])]).value, [[1, 2, 3]])


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        dm.matmul(dm.const(np.ones((2, 3))), dm.const(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="affine"):
        dm.affine(dm.const(np.ones((2, 3))), dm.const(np.ones((3, 2))), dm.const(np.ones((1, 3))))


def test_non_finite_intermediate_raises():
    with pytest.raises(NonFiniteError, match="square"):
        with np.errstate(over="ignore"):
            dm.square(dm.const([[1e200]]))


# --- backward examples -----------------------------------------------------

def test_backward_square():
    x = dm.param([[3.0]])
    grads = dm.backward(dm.total(dm.square(x)))
    assert np.allclose(grads[x], [[6.0]])
    assert np.allclose(x.grad, [[6.0]])


def test_backward_linear_form():
    x, W = dm.const([[1.0, 1.0]]), dm.param([[2.0], [5.0]])
    grads = dm.backward(dm.total(dm.matmul(x, W)))
    assert np.array_equal(grads[W], [[1.0], [1.0]])
    assert x not in grads and x.grad is None


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        dm.backward(dm.square(dm.param(np.ones((2, 2)))))


def test_backward_detects_cycle():
    a = dm.param([[1.0]])
    b = dm.square(a)
    c = dm.square(b)
    b.parents = (c,)  # forge a cycle
    with pytest.raises(ValueError, match="cycle"):
        dm.backward(dm.total(c))


def test_gradients_accumulate_over_shared_parent():
    x = dm.param([[2.0]])
    loss = dm.total(dm.weighted_sum([dm.square(x), x], [1.0, 3.0]))
    assert np.allclose(dm.backward(loss)[x], [[7.0]])


# --- per-op finite-difference checks ----------------------------------------

rng = np.random.default_rng(1234)
_W = rng.normal(size=(4, 3))
_R = rng.normal(size=(6, 6))
_G = rng.normal(size=(6, 3))

OP_CASES = {
    "affine": ((6, 4), lambda x: dm.affine(x, dm.const(_W), dm.const(np.ones((1, 3))))),
    "relu": ((6, 3), lambda x: dm.mul(dm.relu(x), dm.const(_G))),
    "concat": ((6, 3), lambda x: dm.mul(dm.concat([x, dm.square(x)]), dm.const(np.hstack([_G, _G])))),
    "row_slice": ((6, 3), lambda x: dm.square(dm.row_slice(x, [0, 2, 2, 5]))),
    "col_slice": ((6, 3), lambda x: dm.square(dm.col_slice(x, 1, 3))),
    "weighted_sum": ((6, 3), lambda x: dm.square(dm.weighted_sum([x, dm.const(_G)], [0.7, -2.0]))),
    "mul_broadcast": ((6, 1), lambda x: dm.mul(x, dm.const(_G))),
    "square": ((6, 3), lambda x: dm.mul(dm.square(x), dm.const(_G))),
    "matmul": ((6, 3), lambda x: dm.matmul(dm.const(_R), x)),
    "row_normalize": ((6, 3), lambda x: dm.mul(dm.row_normalize(x), dm.const(_G))),
    "pairwise_sq_dists": ((6, 3), lambda x: dm.mul(dm.pairwise_sq_dists(x), dm.const(_R))),
    "cosine": ((6, 3), lambda x: dm.mul(dm.cosine_similarity_matrix(x), dm.const(_R))),
    "qr": ((6, 3), lambda x: dm.mul(dm.qr_orthonormalize(x), dm.const(_G))),
    "softmax_rows": ((6, 3), lambda x: dm.mul(dm.softmax_rows(x), dm.const(_G))),
    "mean": ((6, 3), lambda x: dm.mean(dm.square(x))),
    "div": ((6, 3), lambda x: dm.div(dm.square(x), dm.total(dm.square(x)))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("trial", range(3))
def test_op_gradient_matches_finite_differences(name, trial):
    shape, build = OP_CASES[name]
    x0 = np.random.default_rng(trial).normal(size=shape)

    def f(x):
        return dm.total(build(dm.const(x))).value[0, 0]

    leaf = dm.param(x0)
    analytic = dm.backward(dm.total(build(leaf)))[leaf]
    assert rel_err(analytic, fd_gradient(f, x0)) < 1e-5


# --- pairwise distances ------------------------------------------------------

def test_pairwise_1d():
    assert np.array_equal(dm.pairwise_sq_dists(dm.const([[0.0], [3.0]])).value, [[0, 9], [9, 0]])


def test_pairwise_coincident_rows():
    d = dm.pairwise_sq_dists(dm.const([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])).value
    assert d[0, 1] == 0 and d[1, 0] == 0


def test_pairwise_matches_double_loop():
    x = np.random.default_rng(5).normal(size=(5, 3))
    oracle = np.array([[sum((x[i, c] - x[j, c]) ** 2 for c in range(3)) for j in range(5)] for i in range(5)])
    d = dm.pairwise_sq_dists(dm.const(x)).value
    assert np.max(np.abs(d - oracle)) < 1e-12
    assert np.array_equal(d, d.T) and np.all(d >= 0) and np.all(np.diag(d) == 0)


# --- cosine similarity -------------------------------------------------------

def test_cosine_orthogonal_rows():
    assert dm.cosine_similarity_matrix(dm.const([[1.0, 0.0], [0.0, 1.0]])).value[0, 1] == 0


def test_cosine_hand_value():
    a = dm.cosine_similarity_matrix(dm.const([[1.0, 0.0], [1.0, 1.0]])).value
    assert a[0, 1] == pytest.approx(1 / np.sqrt(2), abs=1e-12)


def test_cosine_unit_rows_diagonal():
    c = np.random.default_rng(0).normal(size=(7, 3))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    a = dm.cosine_similarity_matrix(dm.const(c)).value
    # the epsilon guard itself shifts the diagonal by ~1e-12
    assert np.max(np.abs(np.diag(a) - 1)) <= 1e-12 + 1e-15


def test_cosine_zero_row_is_finite():
    a = dm.cosine_similarity_matrix(dm.const([[0.0, 0.0], [1.0, 1.0]])).value
    assert np.all(np.isfinite(a)) and a[0, 1] == 0


@settings(max_examples=40, deadline=None)
@given(
    c=arrays(np.float64, (6, 3), elements=st.floats(-5, 5)).filter(lambda c: np.all(np.linalg.norm(c, axis=1) > 1)),
    s=arrays(np.float64, (6, 1), elements=st.floats(0.5, 10)),
)
def test_cosine_positive_row_scaling_invariance(c, s):
    # the norm guard is absolute, so invariance holds to ~eps / (|c_i||c_j|)
    a = dm.cosine_similarity_matrix(dm.const(c)).value
    b = dm.cosine_similarity_matrix(dm.const(s * c)).value
    assert np.max(np.abs(a - b)) < 1e-10


# --- QR ------------------------------------------------------------------------

def test_qr_single_column():
    q = dm.qr_orthonormalize(dm.const([[3.0], [4.0]])).value
    assert np.allclose(q, [[0.6], [0.8]], atol=1e-15)


def test_qr_sign_convention():
    q = dm.qr_orthonormalize(dm.const([[-3.0], [-4.0]])).value
    assert np.allclose(q, [[-0.6], [-0.8]], atol=1e-15)


def test_qr_idempotent_on_orthonormal():
    q0 = dm.qr_orthonormalize(dm.const(np.random.default_rng(2).normal(size=(8, 3)))).value
    q1 = dm.qr_orthonormalize(dm.const(q0)).value
    assert np.max(np.abs(q1 - q0)) < 1e-12


def test_qr_rank_deficiency_names_column():
    m = np.random.default_rng(3).normal(size=(6, 3))
    m[:, 2] = 2.0 * m[:, 0] - m[:, 1]
    with pytest.raises(RankDeficiencyError, match="column 2") as info:
        dm.qr_orthonormalize(dm.const(m))
    assert info.value.column == 2


@settings(max_examples=50, deadline=None)
@given(m=arrays(np.float64, (9, 4), elements=st.floats(-10, 10)))
def test_qr_orthonormal_and_spans_input(m):
    try:
        q = dm.qr_orthonormalize(dm.const(m)).value
    except RankDeficiencyError:
        return
    assert np.max(np.abs(q.T @ q - np.eye(4))) < 1e-10
    # span(Q) = span(M): projecting M onto span(Q) leaves nothing behind
    resid = m - q @ (q.T @ m)
    assert np.max(np.abs(resid)) < 1e-8 * max(1.0, np.abs(m).max())


# --- grad_check ------------------------------------------------------------

def test_grad_check_scalar_square():
    report = dm.grad_check(lambda p: dm.total(dm.square(p["x"])), {"x": [[3.0]]}, step=1e-5)
    assert report["x"] < 1e-8


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        dm.grad_check(lambda p: dm.total(p["x"]), {"x": [[1.0]]}, step=0.1)


def test_grad_check_non_finite_loss():
    with pytest.raises(NonFiniteError):
        dm.grad_check(lambda p: dm.total(dm.square(dm.square(dm.square(p["x"])))), {"x": [[1e80]]})


def test_forward_backward_bitwise_deterministic():
    x0 = np.random.default_rng(9).normal(size=(10, 4))

    def run():
        leaf = dm.param(x0)
        c = dm.qr_orthonormalize(dm.matmul(leaf, dm.const(_W)))
        loss = dm.total(dm.mul(dm.cosine_similarity_matrix(c), dm.const(np.ones((10, 10)))))
        return loss.value.copy(), dm.backward(loss)[leaf].copy()

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes() and g1.tobytes() == g2.tobytes()
