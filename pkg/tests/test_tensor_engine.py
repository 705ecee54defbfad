import zipfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliomaseg import tensor_engine as te
from gliomaseg.errors import CheckpointError, NoGraph, OddDimension, ShapeMismatch
from gliomaseg.tensor_engine.gradcheck import check_gradients, relative_error
from gliomaseg.tensor_engine.kernels import conv3d_forward, conv3d_reference


def _op_gradcheck(fn, arrays, rng):
    """Max rel. error of d<R, fn(arrays)> for a random cotangent R."""
    params = [te.Parameter(a) for a in arrays]
    out = fn(*params)
    proj = rng.standard_normal(out.data.shape)
    te.backward(out, proj)
    named = {f"a{i}": a for i, a in enumerate(arrays)}
    analytic = {f"a{i}": p.grad for i, p in enumerate(params)}

    def loss():
        o = fn(*[te.Tensor(a) for a in arrays])
        return te.total(te.Tensor(o.data * proj)) if o.pattern is None else _project(o, proj)

    return check_gradients(loss, named, analytic, h=1e-4, max_entries=40, rng=rng)


def _project(o, proj):
    # keep the graph so kink detection sees the op's pattern
    node = te.Tensor(np.asarray((o.data * proj).sum()), requires_grad=False)
    node.parents = (o,)
    return node


# -- conv3d -----------------------------------------------------------------

def test_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 4, 6)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3, 3), np.float32)
    w[0, 0, 1, 1, 1] = 1
    out = te.conv3d(te.Tensor(x), te.Tensor(w), te.Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_ones_kernel_interior_sum():
    out = conv3d_forward(np.ones((1, 1, 5, 5, 5)), np.ones((1, 1, 3, 3, 3)), None)
    assert out[0, 0, 2, 2, 2] == 27
    assert out[0, 0, 0, 0, 0] == 8  # corner sees a 2x2x2 neighbourhood


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 3, 5]))
def test_conv_matches_reference(seed, k):
    rng = np.random.default_rng(seed)
    cin, cout = rng.integers(1, 5, 2)
    dims = tuple(rng.integers(1, 7, 3))
    x = rng.standard_normal((1, cin) + dims)
    w = rng.standard_normal((cout, cin, k, k, k))
    b = rng.standard_normal(cout)
    np.testing.assert_allclose(conv3d_forward(x, w, b), conv3d_reference(x, w, b), rtol=1e-10, atol=1e-10)


def test_conv_linearity(rng):
    x1, x2 = rng.standard_normal((2, 1, 2, 5, 5, 5))
    w1, w2 = rng.standard_normal((2, 3, 2, 3, 3, 3))
    f = lambda x, w: conv3d_forward(x, w, None)  # noqa: E731
    np.testing.assert_allclose(f(2 * x1 - x2, w1), 2 * f(x1, w1) - f(x2, w1), atol=1e-10)
    np.testing.assert_allclose(f(x1, w1 + 3 * w2), f(x1, w1) + 3 * f(x1, w2), atol=1e-10)


def test_conv_shape_errors():
    x = te.Tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ShapeMismatch):
        te.conv3d(x, te.Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ShapeMismatch):
        te.conv3d(x, te.Tensor(np.zeros((1, 2, 2, 2, 2))))
    with pytest.raises(ShapeMismatch):
        te.conv3d(x, te.Tensor(np.zeros((1, 2, 3, 3, 3))), te.Tensor(np.zeros(2)))


def test_conv_deterministic(rng):
    x = rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32)
    w = rng.standard_normal((8, 4, 3, 3, 3)).astype(np.float32)
    assert conv3d_forward(x, w, None).tobytes() == conv3d_forward(x.copy(), w.copy(), None).tobytes()


# -- small ops ----------------------------------------------------------------

def test_relu_pool_upsample_concat_examples():
    r = te.relu(te.Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1, 1)))
    assert r.data.ravel().tolist() == [0, 0, 2]
    block = np.arange(1, 9, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    assert te.max_pool3d(te.Tensor(block)).data.item() == 8
    up = te.upsample_trilinear(te.Tensor(np.full((1, 2, 2, 3, 2), 1.5)))
    assert up.data.shape == (1, 2, 4, 6, 4) and np.all(up.data == 1.5)
    cat = te.concat_channels(te.Tensor(np.zeros((1, 2, 2, 2, 2))), te.Tensor(np.ones((1, 3, 2, 2, 2))))
    assert cat.data.shape[1] == 5


def test_pool_tie_goes_to_first_voxel():
    x = te.Parameter(np.ones((1, 1, 2, 2, 2)))
    te.backward(te.total(te.max_pool3d(x)))
    g = x.grad.ravel()
    assert g[0] == 1 and g[1:].sum() == 0


def test_shape_errors_small_ops():
    with pytest.raises(OddDimension):
        te.max_pool3d(te.Tensor(np.zeros((1, 1, 3, 2, 2))))
    with pytest.raises(ShapeMismatch):
        te.concat_channels(te.Tensor(np.zeros((1, 1, 2, 2, 2))), te.Tensor(np.zeros((1, 1, 2, 2, 4))))
    with pytest.raises(ShapeMismatch):
        te.max_pool3d(te.Tensor(np.zeros((2, 2))))


def test_instance_norm_examples():
    const = te.instance_norm(te.Tensor(np.full((1, 1, 2, 2, 2), 7.0)))
    assert np.all(const.data == 0)
    two = np.array([1.0, 3.0] * 4).reshape(1, 1, 2, 2, 2)
    out = te.instance_norm(te.Tensor(two)).data.ravel()
    np.testing.assert_allclose(out, [-1, 1] * 4, atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_softmax_normalized(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 10, (1, 4, 3, 2, 3))
    s = te.softmax_channels(te.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(s >= 0) and np.all(s <= 1)


def test_softmax_uniform_and_limit():
    s = te.softmax_channels(te.Tensor(np.zeros((1, 4, 1, 1, 1)))).data.ravel()
    np.testing.assert_allclose(s, 0.25)
    big = np.array([1000.0, 0, 0, 0]).reshape(1, 4, 1, 1, 1)
    s = te.softmax_channels(te.Tensor(big)).data.ravel()
    assert s[0] == pytest.approx(1.0) and s[1:].max() < 1e-100


def _scalar_dice_ce(p, t, smooth=1.0):
    """Loop-based reimplementation used as an oracle."""
    c = p.shape[1]
    flat_p = p.reshape(c, -1)
    flat_t = t.reshape(c, -1)
    dices = []
    for k in range(1, c):
        inter = sum(a * b for a, b in zip(flat_p[k], flat_t[k]))
        dices.append((2 * inter + smooth) / (sum(flat_p[k]) + sum(flat_t[k]) + smooth))
    ce = 0.0
    n = flat_p.shape[1]
    for v in range(n):
        for k in range(c):
            if flat_t[k, v]:
                ce -= np.log(max(flat_p[k, v], 1e-12))
    return (1 - sum(dices) / len(dices)) + ce / n


def test_dice_ce_against_scalar_oracle(rng):
    cls = rng.integers(0, 2, (3, 3, 2))
    t = np.stack([cls == 0, cls == 1]).astype(float)[None]
    p = np.full_like(t, 0.5)
    assert te.dice_ce_loss(te.Tensor(p), t).item() == pytest.approx(_scalar_dice_ce(p, t), rel=1e-12)
    logits = rng.standard_normal((1, 4, 2, 3, 2))
    p = te.softmax_channels(te.Tensor(logits)).data
    cls = rng.integers(0, 4, (2, 3, 2))
    t = np.stack([cls == k for k in range(4)]).astype(float)[None]
    assert te.dice_ce_loss(te.Tensor(p), t).item() == pytest.approx(_scalar_dice_ce(p, t), rel=1e-12)


def test_dice_ce_perfect_and_nonnegative(rng):
    cls = rng.integers(0, 4, (4, 4, 4))
    t = np.stack([cls == k for k in range(4)]).astype(float)[None]
    assert te.dice_ce_loss(te.Tensor(t), t).item() < 1e-3
    for _ in range(10):
        p = te.softmax_channels(te.Tensor(rng.normal(0, 3, t.shape))).data
        assert te.dice_ce_loss(te.Tensor(p), t).item() >= 0
    with pytest.raises(ShapeMismatch):
        te.dice_ce_loss(te.Tensor(t), t[:, :3])


# -- gradients ----------------------------------------------------------------

def _random_case(seed):
    rng = np.random.default_rng(seed)
    d = tuple(2 * rng.integers(1, 3, 3))
    c = int(rng.integers(1, 4))
    return rng, d, c


OPS = {
    "conv3d_k3": lambda rng, d, c: (lambda x, w, b: te.conv3d(x, w, b),
                                    [rng.standard_normal((1, c) + d), rng.standard_normal((2, c, 3, 3, 3)),
                                     rng.standard_normal(2)]),
    "conv3d_k1": lambda rng, d, c: (lambda x, w, b: te.conv3d(x, w, b),
                                    [rng.standard_normal((1, c) + d), rng.standard_normal((3, c, 1, 1, 1)),
                                     rng.standard_normal(3)]),
    "relu": lambda rng, d, c: (te.relu, [rng.standard_normal((1, c) + d)]),
    "max_pool3d": lambda rng, d, c: (te.max_pool3d, [rng.standard_normal((1, c) + d)]),
    "upsample_trilinear": lambda rng, d, c: (te.upsample_trilinear, [rng.standard_normal((1, c) + d)]),
    "concat_channels": lambda rng, d, c: (te.concat_channels, [rng.standard_normal((1, c) + d),
                                                               rng.standard_normal((1, 2) + d)]),
    "instance_norm": lambda rng, d, c: (te.instance_norm, [rng.standard_normal((1, c) + d)]),
    "softmax_channels": lambda rng, d, c: (te.softmax_channels, [rng.standard_normal((1, 4) + d)]),
    "add": lambda rng, d, c: (te.add, [rng.standard_normal((1, c) + d), rng.standard_normal((1, c) + d)]),
    "scale": lambda rng, d, c: (lambda x: te.scale(x, -1.7), [rng.standard_normal((1, c) + d)]),
}


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients(op, seed):
    rng, d, c = _random_case(seed)
    fn, arrays = OPS[op](rng, d, c)
    assert _op_gradcheck(fn, arrays, rng) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_dice_ce_gradient(seed):
    rng, d, _ = _random_case(seed)
    cls = rng.integers(0, 4, d)
    t = np.stack([cls == k for k in range(4)]).astype(float)[None]
    w = rng.uniform(0.5, 2.0, 4)
    logits = rng.standard_normal((1, 4) + d)
    p = te.Parameter(logits)
    te.backward(te.dice_ce_loss(te.softmax_channels(p), t, w))
    err = check_gradients(lambda: te.dice_ce_loss(te.softmax_channels(te.Tensor(logits)), t, w).item(),
                          {"x": logits}, {"x": p.grad})
    assert err < 1e-4


def test_chain_rule_two_ops(rng):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    px, pw = te.Parameter(x), te.Parameter(w)
    te.backward(te.total(te.instance_norm(te.conv3d(px, pw))))
    # sum of instance-normed output is identically 0: gradients vanish
    assert np.abs(px.grad).max() < 1e-9
    px, pw = te.Parameter(x), te.Parameter(w)
    loss = lambda a, b: te.total(te.upsample_trilinear(te.conv3d(a, b)))  # noqa: E731
    te.backward(loss(px, pw))
    err = check_gradients(lambda: loss(te.Tensor(x), te.Tensor(w)).item(), {"x": x, "w": w},
                          {"x": px.grad, "w": pw.grad}, max_entries=30)
    assert err < 1e-4


def test_relative_error_floor():
    assert relative_error(1e-9, 0.0) == 1e-9
    assert relative_error(2.0, 1.0) == 0.5


# -- backward / adam ---------------------------------------------------------

def test_sum_gradient_all_ones():
    w = te.Parameter(np.arange(6.0).reshape(1, 1, 1, 2, 3))
    te.backward(te.total(w))
    np.testing.assert_array_equal(w.grad, np.ones((1, 1, 1, 2, 3)))


def test_gradients_accumulate_then_clear():
    w = te.Parameter(np.ones((1, 1, 1, 1, 2)))
    te.backward(te.total(w))
    te.backward(te.total(te.scale(w, 2.0)))
    np.testing.assert_array_equal(w.grad, [[[[[3.0, 3.0]]]]])
    te.adam_step([w])
    assert w.grad is None


def test_no_graph():
    with pytest.raises(NoGraph):
        te.backward(te.total(te.Tensor(np.ones((1, 1, 1, 1, 1)))))


def test_adam_first_step_magnitude(rng):
    w0 = rng.standard_normal(10)
    w = te.Parameter(w0.copy())
    w.grad = rng.standard_normal(10) * 1e-3
    te.adam_step([w], lr=0.01)
    np.testing.assert_allclose(np.abs(w.data - w0), 0.01, rtol=1e-4)
    assert w.step == 1


# -- checkpoint --------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    a = te.Parameter(rng.standard_normal((2, 3)).astype(np.float32))
    a.m, a.v, a.step = rng.random((2, 3)), rng.random((2, 3)), 7
    b = te.Parameter(rng.standard_normal(4))
    path = te.save_checkpoint(tmp_path / "c.ckpt", [("a", a), ("b", b)], {"seed": 3})
    manifest, tensors = te.read_checkpoint(path)
    assert manifest["seed"] == 3 and manifest["version"] == 1
    vals, m, v, step = tensors["a"]
    assert vals.dtype == np.float32 and np.array_equal(vals, a.data)
    assert np.array_equal(m, a.m) and np.array_equal(v, a.v) and step == 7
    again = te.save_checkpoint(tmp_path / "d.ckpt", [("a", a), ("b", b)], {"seed": 3})
    assert path.read_bytes() == again.read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        te.read_checkpoint(bad)
    with zipfile.ZipFile(tmp_path / "nover.ckpt", "w") as zf:
        zf.writestr("manifest.json", "{}")
    with pytest.raises(CheckpointError, match="version"):
        te.read_checkpoint(tmp_path / "nover.ckpt")
