import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhmr.nn_core import (MLP, Attention, LayerNorm, Linear, ParamStore, ShapeError, Tensor,
                          adam_step, attention, backward, grad_check, no_grad)
from mhmr.nn_core import tensor as T
from mhmr.nn_core.gradcheck import leaf, rel_error
from mhmr.nn_core.io import CheckpointError, load_into, read_manifest, save_store

rng0 = np.random.default_rng(0)


def test_primitive_examples():
    np.testing.assert_allclose(T.softmax(np.zeros(3)).data, np.full(3, 1 / 3))
    assert not T.layer_norm(np.full(5, 3.7)).data.any()
    A = rng0.normal(size=(3, 4))
    np.testing.assert_array_equal(T.matmul(np.eye(3), A).data, A)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_normalized(xs):
    s = T.softmax(np.array(xs)).data
    assert (s >= 0).all()
    assert abs(s.sum() - 1.0) <= 1e-12


def test_backward_examples():
    w = leaf([1.0, 2.0])
    backward(T.reduce_sum(w))
    np.testing.assert_array_equal(w.grad, [1, 1])
    w = leaf([1.0, 2.0])
    backward(T.reduce_sum(w * w))
    np.testing.assert_array_equal(w.grad, [2, 4])


def test_backward_rejects_nonscalar():
    w = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(w * 2.0)


def test_unreachable_params_zero():
    store = ParamStore()
    a = store.add("a", np.ones(3))
    store.add("b", np.ones(2))
    backward(T.reduce_sum(a * 3.0))
    g = store.grads()
    np.testing.assert_array_equal(g["a"], 3.0)
    np.testing.assert_array_equal(g["b"], 0.0)


def test_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        T.add(np.ones(2), np.ones(3))


def test_no_grad_builds_no_graph():
    w = leaf([1.0])
    with no_grad():
        y = w * 2.0
    assert not y.requires_grad


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (T.square(b) + 1.0),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "exp": lambda a, b: T.exp(a * 0.3),
    "log": lambda a, b: T.log(T.square(a) + 0.5),
    "sqrt": lambda a, b: T.sqrt(T.square(b) + 0.1),
    "abs": lambda a, b: T.abs(a),
    "relu": lambda a, b: T.relu(a),
    "gelu": lambda a, b: T.gelu(a),
    "tanh": lambda a, b: T.tanh(a),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "softmax": lambda a, b: T.softmax(a, axis=-1) * b,
    "layer_norm": lambda a, b: T.layer_norm(a) * b,
    "concat": lambda a, b: T.concat([a, b], axis=1) * T.concat([b, a], axis=1),
    "stack": lambda a, b: T.stack([a, b], axis=0) * 2.0,
    "slice": lambda a, b: a[:, 1:3] * b[:, :2],
    "take": lambda a, b: T.take(a, [2, 0, 2], axis=1),
    "gather": lambda a, b: T.gather_rows(b, [1, 1, 0]),
    "reshape": lambda a, b: T.reshape(a, (4, 3)) @ T.reshape(b, (3, 4)),
    "mean": lambda a, b: T.reduce_mean(a * b, axis=0),
    "swapaxes": lambda a, b: T.swapaxes(T.reshape(a, (3, 2, 2)), 0, 2) * 1.5,
    "cross": lambda a, b: T.cross(a[:, :3], b[:, :3]),
    "clamp": lambda a, b: T.clamp(a, -0.5, 0.5),
    "broadcast": lambda a, b: a * T.reduce_sum(b, axis=0, keepdims=True),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
    w = rng.normal(size=OPS[name](a, b).shape)
    err = grad_check(lambda: T.reduce_sum(OPS[name](a, b) * w), {"a": a, "b": b})
    assert err <= 1e-4


def test_grad_check_linear_and_corrupted():
    rng = np.random.default_rng(1)
    x = leaf(rng.normal(size=(5, 3)))
    W = leaf(rng.normal(size=(3, 2)))
    c = rng.normal(size=(5, 2))

    def build():
        return T.reduce_sum(T.matmul(x, W) * c)

    # no truncation error on a linear graph, so a wide step only leaves round-off
    assert grad_check(build, {"x": x, "W": W}, eps=1e-2) <= 1e-10

    def corrupt(g):
        g = dict(g)
        g["W"] = g["W"] * 1.1
        return g

    assert grad_check(build, {"x": x, "W": W}, corrupt=corrupt) > 1e-2


def test_grad_check_across_kink():
    # |x| probed at a point closer to 0 than the step: refinement recovers the slope
    x = leaf([3e-6, -2.0])
    err, info = grad_check(lambda: T.reduce_sum(T.abs(x)), {"x": x}, return_details=True)
    assert err <= 1e-6
    assert info["refined"] >= 1


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1.0, 1.0 + 1e-8) == pytest.approx(1e-8, rel=1e-6)


def test_attention_examples():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(4, 6))
    k = rng.normal(size=(1, 6))
    v = rng.normal(size=(1, 8))
    out = attention(q, k, v, heads=2).data
    np.testing.assert_allclose(out, np.repeat(v, 4, 0), atol=1e-14)
    k = np.repeat(rng.normal(size=(1, 6)), 5, 0)
    v = rng.normal(size=(5, 8))
    np.testing.assert_allclose(attention(q, k, v, 2).data, np.repeat(v.mean(0, keepdims=True), 4, 0),
                               atol=1e-14)
    k = rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    np.testing.assert_allclose(attention(q, k, v, 2).data, attention(q, k[perm], v[perm], 2).data,
                               atol=1e-14)
    with pytest.raises(ShapeError):
        attention(q, k, v, heads=4)


def test_attention_mask_blocks_keys():
    rng = np.random.default_rng(3)
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    mask = np.array([[0.0, -1e9, -1e9], [-1e9, 0.0, 0.0]])
    out = attention(q, k, v, 2, mask).data
    np.testing.assert_allclose(out[0], v[0], atol=1e-12)
    np.testing.assert_allclose(out[1], attention(q[1:], k[1:], v[1:], 2).data[0], atol=1e-12)


def test_layers_gradients():
    rng = np.random.default_rng(4)
    store = ParamStore()
    lin = Linear(store, "lin", 4, 6, rng)
    ln = LayerNorm(store, "ln", 6)
    mlp = MLP(store, "mlp", 6, 12, 6, rng)
    att = Attention(store, "att", 6, 5, 4, 2, rng)
    x = rng.normal(size=(3, 4))
    ctx = rng.normal(size=(7, 5))
    ln.gain.data[:] = rng.normal(size=6)

    def build():
        h = ln(lin(x))
        h = h + mlp(h)
        h = h + att(h, ctx)
        return T.reduce_sum(T.square(h))

    assert grad_check(build, dict(store.items())) <= 1e-4
    assert store.num_parameters() == sum(p.data.size for _, p in store.items())


def test_adam_examples():
    store = ParamStore()
    p = store.add("w", np.array([0.5, -1.0]))
    adam_step(store, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p.data, [0.5, -1.0])
    store = ParamStore()
    p = store.add("w", np.array([0.5]))
    adam_step(store, {"w": np.array([3.0])}, lr=0.01)
    assert p.data[0] == pytest.approx(0.5 - 0.01, abs=1e-9)
    with pytest.raises(KeyError):
        adam_step(store, {"x": np.zeros(1)}, lr=0.1)


def test_adam_deterministic():
    out = []
    for _ in range(2):
        store = ParamStore()
        store.add("w", np.arange(4.0))
        for k in range(5):
            adam_step(store, {"w": np.sin(np.arange(4.0) + k)}, lr=0.05)
        out.append(store["w"].data.copy())
    assert np.array_equal(out[0], out[1])


def _store():
    rng = np.random.default_rng(5)
    s = ParamStore()
    Linear(s, "a", 3, 4, rng)
    LayerNorm(s, "b", 4)
    adam_step(s, {k: rng.normal(size=p.shape) for k, p in s.items()}, lr=0.01)
    return s


def test_checkpoint_round_trip(tmp_path):
    s = _store()
    save_store(s, tmp_path / "ck", extra={"note": 1})
    t = ParamStore()
    Linear(t, "a", 3, 4, np.random.default_rng(9))
    LayerNorm(t, "b", 4)
    man = load_into(t, tmp_path / "ck")
    assert man["extra"] == {"note": 1}
    assert t.step == s.step == 1
    for k, p in s.items():
        assert np.array_equal(p.data, t[k].data)
        assert np.array_equal(s.m[k], t.m[k]) and np.array_equal(s.v[k], t.v[k])


def test_checkpoint_f4_export(tmp_path):
    s = _store()
    save_store(s, tmp_path / "ck", dtype="<f4")
    man = read_manifest(tmp_path / "ck")
    assert man["dtype"] == "<f4"
    size = (tmp_path / "ck" / "params.bin").stat().st_size
    assert size == 4 * 3 * sum(p.data.size for _, p in s.items())


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "missing")
    s = _store()
    save_store(s, tmp_path / "ck")
    other = ParamStore()
    other.add("zzz", np.zeros(2))
    with pytest.raises(CheckpointError):
        load_into(other, tmp_path / "ck")
    raw = (tmp_path / "ck" / "params.bin").read_bytes()
    (tmp_path / "ck" / "params.bin").write_bytes(raw[:20])
    t = ParamStore()
    Linear(t, "a", 3, 4, np.random.default_rng(9))
    LayerNorm(t, "b", 4)
    with pytest.raises(CheckpointError):
        load_into(t, tmp_path / "ck")


def test_tensor_sugar():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    y = ((2.0 * a - 1.0) / 2.0 + a @ np.ones((3, 1))).sum()
    y.backward()
    # 1 from the elementwise term, 3 from the broadcast (2, 1) column
    np.testing.assert_allclose(a.grad, np.full((2, 3), 4.0))
