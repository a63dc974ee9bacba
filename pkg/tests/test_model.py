import numpy as np
import pytest

from bmvc import diffmath as dm
from bmvc import model as md
from bmvc.errors import ShapeError
from bmvc.loss import reconstruction_loss


def bound(p):
    return {k: dm.const(v) for k, v in p.arrays.items()}


def test_init_deterministic():
    a, b = md.init_params([5, 7], 3, "cat", seed=4), md.init_params([5, 7], 3, "cat", seed=4)
    assert all(a.arrays[k].tobytes() == b.arrays[k].tobytes() for k in a.arrays)
    c = md.init_params([5, 7], 3, "cat", seed=5)
    assert not np.array_equal(a.arrays["enc0.W1"], c.arrays["enc0.W1"])


def test_init_shapes_and_zero_biases():
    p = md.init_params([5, 7], 4, "cat", seed=0)
    assert p.arrays["enc1.W1"].shape == (7, 196)
    assert p.arrays["enc1.W2"].shape == (196, 128)
    assert p.arrays["enc1.W3"].shape == (128, 64)
    assert p.arrays["dec0.W3"].shape == (196, 5)
    assert p.arrays["fuse.W"].shape == (128, 64)
    assert p.arrays["proj1.W"].shape == (64, 4)
    for name, arr in p.arrays.items():
        if name.rsplit(".", 1)[1].startswith("b"):
            assert not arr.any()


def test_init_weight_law():
    # enc0.W2 is 196x128 (~2.5e4 draws) from U(-a, a)
    w = md.init_params([3], 2, seed=1).arrays["enc0.W2"]
    a = np.sqrt(6.0 / (196 + 128))
    sigma = a / np.sqrt(3.0) / np.sqrt(w.size)
    assert abs(w.mean()) < 3 * sigma
    assert np.abs(w).max() <= a


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        md.init_params([0, 3], 2)
    with pytest.raises(ValueError):
        md.init_params([3], 1)


def test_encode_zero_input():
    p = md.init_params([6], 2, seed=0)
    z = md.encode(bound(p), np.zeros((4, 6)), 0)
    assert z.shape == (4, 64) and not z.value.any()


def test_encode_shape_mismatch():
    p = md.init_params([6], 2, seed=0)
    with pytest.raises(ShapeError):
        md.encode(bound(p), np.zeros((4, 5)), 0)


def test_encode_gradient():
    p = md.init_params([4], 2, seed=2)
    x = np.random.default_rng(0).random((5, 4))
    params = {"enc0.W1": p.arrays["enc0.W1"], "enc0.W3": p.arrays["enc0.W3"], "enc0.b2": p.arrays["enc0.b2"]}

    def build(q):
        merged = {**bound(p), **q}
        return dm.total(md.encode(merged, x, 0))

    report = dm.grad_check(build, params, max_entries=40)
    assert max(report.values()) < 1e-5


def test_asum_identity_and_identical_views():
    p = md.init_params([3, 3], 2, "asum", seed=0)
    z = dm.const(np.random.default_rng(1).normal(size=(6, 64)))
    assert np.array_equal(md.fuse_features(bound(p), [z, z], "asum").value, z.value)
    p1 = md.init_params([3], 2, "asum", seed=0)
    assert np.array_equal(md.fuse_features(bound(p1), [z], "asum").value, z.value)


def test_cat_shape():
    p = md.init_params([3, 3], 2, "cat", seed=0)
    zs = [dm.const(np.ones((7, 64))), dm.const(np.zeros((7, 64)))]
    assert md.fuse_features(bound(p), zs, "cat").shape == (7, 64)


def test_wsum_weights_sum_to_one():
    p = md.init_params([3, 3, 3], 2, "wsum", seed=0)
    rng = np.random.default_rng(2)
    zs = [dm.const(rng.normal(size=(9, 64))) for _ in range(3)]
    w = md.fusion_weights(bound(p), zs).value
    assert w.shape == (9, 3) and np.max(np.abs(w.sum(axis=1) - 1)) < 1e-12
    assert md.fuse_features(bound(p), zs, "wsum").shape == (9, 64)


def test_fuse_rejects_bad_shapes():
    p = md.init_params([3, 3], 2, "asum", seed=0)
    with pytest.raises(ShapeError):
        md.fuse_features(bound(p), [dm.const(np.ones((4, 64))), dm.const(np.ones((4, 32)))], "asum")
    with pytest.raises(ValueError):
        md.fuse_features(bound(p), [dm.const(np.ones((4, 64)))], "max")


def test_decode_shapes_and_zero():
    p = md.init_params([5, 8], 2, seed=0)
    out = md.decode(bound(p), dm.const(np.zeros((3, 64))), 1)
    assert out.shape == (3, 8) and not out.value.any()
    with pytest.raises(ShapeError):
        md.decode(bound(p), dm.const(np.zeros((3, 32))), 0)


def test_decode_reconstruction_gradient():
    p = md.init_params([4], 2, seed=3)
    rng = np.random.default_rng(3)
    f, x = rng.normal(size=(5, 64)), rng.random((5, 4))
    params = {"dec0.W1": p.arrays["dec0.W1"], "dec0.W3": p.arrays["dec0.W3"], "dec0.b3": p.arrays["dec0.b3"]}

    def build(q):
        return reconstruction_loss(md.decode({**bound(p), **q}, dm.const(f), 0), x)

    assert max(dm.grad_check(build, params, max_entries=40).values()) < 1e-5


def test_cluster_indicators():
    p = md.init_params([4], 3, seed=0)
    z = dm.const(np.random.default_rng(4).normal(size=(10, 64)))
    c = md.cluster_indicators(bound(p), z, 0)
    assert c.shape == (10, 3)
    assert np.max(np.abs(c.value.T @ c.value - np.eye(3))) < 1e-10
    weights = np.random.default_rng(5).normal(size=(10, 3))

    def build(q):
        return dm.total(dm.mul(md.cluster_indicators(q, z, 0), dm.const(weights)))

    assert dm.grad_check(build, {"proj0.W": p.arrays["proj0.W"]}, max_entries=60)["proj0.W"] < 1e-5


def test_cluster_indicators_needs_enough_rows():
    p = md.init_params([4], 5, seed=0)
    with pytest.raises(ShapeError):
        md.cluster_indicators(bound(p), dm.const(np.ones((3, 64))), 0)


@pytest.mark.parametrize("fusion", ["cat", "asum", "wsum"])
def test_forward_finite_and_row_equivariant(fusion):
    rng = np.random.default_rng(6)
    xs = [rng.random((12, 5)), rng.random((12, 3))]
    p = bound(md.init_params([5, 3], 3, fusion, seed=0))
    perm = rng.permutation(12)

    def run(views):
        zs = [md.encode(p, x, r) for r, x in enumerate(views)]
        f = md.fuse_features(p, zs, fusion)
        return [md.decode(p, f, r).value for r in range(2)] + [f.value] + [
            md.cluster_indicators(p, z, r).value for r, z in enumerate(zs)]

    base, permuted = run(xs), run([x[perm] for x in xs])
    for a, b in zip(base[:3], permuted[:3]):
        assert np.all(np.isfinite(a)) and np.allclose(a[perm], b, atol=1e-12)
    # QR output is equivariant up to roundoff in the orthogonalisation
    for a, b in zip(base[3:], permuted[3:]):
        assert np.allclose(a[perm], b, atol=1e-10)


@pytest.mark.parametrize("fusion", ["cat", "asum", "wsum"])
def test_checkpoint_roundtrip(tmp_path, fusion):
    p = md.init_params([5, 3, 2], 4, fusion, seed=9)
    md.save_checkpoint(p, tmp_path / "m.bmvc")
    blob = (tmp_path / "m.bmvc").read_bytes()
    assert blob[:4] == b"BMVC"
    q = md.load_checkpoint(tmp_path / "m.bmvc")
    assert q.dims == [5, 3, 2] and q.n_clusters == 4 and q.fusion == fusion
    assert all(np.array_equal(p.arrays[k], q.arrays[k]) for k in p.arrays)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        md.load_checkpoint(tmp_path / "bad")
