import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, kind_model, rel_err
from relprop.layers import KINDS, LayerShapeError, LayerSpec, conv2d, im2col, softmax
from relprop.model import Model, abs_forward, backward, forward, forward_batch, grad, mlp, small_cnn, toy_network


# ---------------------------------------------------------------- forward


def test_identity_linear_forward():
    m = Model([LayerSpec("linear", {"weight": np.eye(2), "bias": np.zeros(2)})], (2,), 2)
    np.testing.assert_array_equal(forward(m, np.array([3.0, 4.0])).logits, [3.0, 4.0])


def test_toy_network_hidden_and_output():
    tape = forward(toy_network((-1.0, 2.0)), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(tape.output(0), [1.0, 1.0])
    np.testing.assert_array_equal(tape.logits, [2.0])


def test_mlp_matches_nested_loop_oracle():
    m = mlp([4, 5, 3, 2], seed=0, bias_scale=0.5)
    x = np.random.default_rng(0).normal(size=4)
    a = list(x)
    for i, spec in enumerate(m.layers):
        if spec.kind == "relu":
            a = [max(v, 0.0) for v in a]
            continue
        w, b = spec.params["weight"], spec.params["bias"]
        a = [sum(w[j, k] * a[k] for k in range(len(a))) + b[j] for j in range(w.shape[0])]
    np.testing.assert_allclose(forward(m, x).logits, a, rtol=0, atol=1e-12)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(1, 2, 6, 5)), rng.normal(size=(3, 2, 3, 3))
    y, _ = conv2d(x, w, stride=2, pad=1)
    xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros(y.shape[1:])
    for o in range(3):
        for i in range(ref.shape[1]):
            for j in range(ref.shape[2]):
                ref[o, i, j] = (xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(y[0], ref, atol=1e-12)


def test_shape_mismatch_names_layer():
    m = small_cnn()
    with pytest.raises(LayerShapeError) as e:
        forward(m, np.zeros((1, 27, 28)))
    assert e.value.layer == 0
    bad = Model([LayerSpec("linear", {"weight": np.ones((3, 4)), "bias": np.zeros(3)}), LayerSpec("linear", {"weight": np.ones((2, 5)), "bias": np.zeros(2)})], (4,), 2)
    with pytest.raises(LayerShapeError) as e:
        forward(bad, np.ones(4))
    assert e.value.layer == 1


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("batchnorm", {"gamma": np.ones(2), "beta": np.zeros(2), "mean": np.zeros(2), "var": np.array([1.0, 0.0])})
    with pytest.raises(ValueError):
        LayerSpec("self-attention", {f"w{n}": np.eye(6) for n in "qkvo"} | {f"b{n}": np.zeros(6) for n in "qkvo"}, {"heads": 4})
    with pytest.raises(ValueError):
        LayerSpec("dropout")
    with pytest.raises(ValueError):
        Model([LayerSpec("residual-begin")], (1,), 1)


def test_forward_deterministic_and_immutable():
    m = small_cnn(seed=3)
    x = np.random.default_rng(2).uniform(size=(1, 28, 28))
    a, b = forward(m, x), forward(m, x)
    for na, nb in zip(a.nodes, b.nodes):
        assert na.output.tobytes() == nb.output.tobytes()
    with pytest.raises(ValueError):
        a.nodes[0].output[...] = 0


# ---------------------------------------------------------------- gradients


def test_linear_gradient_is_transpose():
    w = np.random.default_rng(0).normal(size=(3, 4))
    m = Model([LayerSpec("linear", {"weight": w, "bias": np.zeros(3)})], (4,), 3)
    s = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(grad(forward(m, np.ones(4)), s), w.T @ s, atol=1e-15)


def test_softmax_gradient_at_uniform_logits():
    m = Model([LayerSpec("softmax")], (3,), 3)
    g = grad(forward(m, np.zeros(3)), np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(g, [2 / 9, -1 / 9, -1 / 9], atol=1e-15)


def test_empty_tape_rejected():
    m = Model([], (2,), 2)
    with pytest.raises(ValueError):
        grad(forward(m, np.ones(2)), np.ones(2))


def test_small_cnn_gradient_finite_differences():
    m = small_cnn(input_shape=(1, 8, 8), n_classes=3, channels=(2, 3), hidden=5, seed=0, bias_scale=0.1)
    rng = np.random.default_rng(0)
    x, s = rng.normal(size=(1, 8, 8)), rng.normal(size=3)
    assert rel_err(grad(forward(m, x), s), central_difference(m, x, s)) < 1e-4


GRAD_KINDS = [k for k in KINDS if k != "residual-begin"]


@pytest.mark.parametrize("kind", GRAD_KINDS)
def test_gradient_matches_finite_differences(kind):
    tol = 1e-3 if kind == "gelu" else 1e-4
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng([trial, KINDS.index(kind)])
        m = kind_model(kind, rng)
        x, s = rng.normal(size=m.input_shape), rng.normal(size=m.n_classes)
        worst = max(worst, rel_err(grad(forward(m, x), s), central_difference(m, x, s)))
    assert worst < tol


def test_parameter_gradients_finite_differences():
    rng = np.random.default_rng(5)
    m = kind_model("self-attention", rng)
    x, s = rng.normal(size=m.input_shape), rng.normal(size=3)
    _, pg = backward(forward(m, x), s, params=True)
    spec = m.layers[0]
    # the key bias is absent here: softmax ignores a per-row shift, so its gradient is exactly zero
    np.testing.assert_allclose(pg[0]["bk"], 0.0, atol=1e-12)
    for name in ("wq", "bq", "wv", "wo"):
        p = spec.params[name]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-6
            up = forward(m, x).logits @ s
            p[idx] = old - 1e-6
            dn = forward(m, x).logits @ s
            p[idx] = old
            fd[idx] = (up - dn) / 2e-6
        assert rel_err(pg[0][name], fd) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_relu_and_maxpool_zero_gradient_where_inactive(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6,))
    m = kind_model("relu", rng)
    g = grad(forward(m, x), rng.normal(size=3))
    assert np.all(g[x < 0] == 0)
    xp = rng.normal(size=(2, 4, 4))
    mp = kind_model("maxpool2d", rng)
    gp = grad(forward(mp, xp), rng.normal(size=3))
    blocks = xp.reshape(2, 2, 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(2, 2, 2, 4)
    winners = np.zeros_like(blocks, dtype=bool)
    np.put_along_axis(winners, blocks.argmax(-1)[..., None], True, axis=-1)
    mask = winners.reshape(2, 2, 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(2, 4, 4)
    assert np.all(gp[~mask] == 0)


def test_maxpool_ties_route_to_lowest_index():
    m = Model([LayerSpec("maxpool2d", hyper={"kernel": 2}), LayerSpec("flatten")], (1, 2, 2), 1)
    g = grad(forward(m, np.ones((1, 2, 2))), np.ones(1))
    np.testing.assert_array_equal(g, [[[1.0, 0.0], [0.0, 0.0]]])


def test_batched_forward_matches_single():
    m = small_cnn(input_shape=(1, 8, 8), n_classes=3, channels=(2, 3), hidden=5, seed=1)
    xs = np.random.default_rng(1).normal(size=(4, 1, 8, 8))
    batched = forward_batch(m, xs).output()
    for i in range(4):
        np.testing.assert_allclose(forward(m, xs[i]).logits, batched[i], atol=1e-12)


def test_im2col_shape():
    cols = im2col(np.zeros((2, 3, 5, 5)), 3, 3, stride=2, pad=1)
    assert cols.shape == (2, 27, 9)


# ---------------------------------------------------------------- absolute forward


@pytest.mark.parametrize("hidden, expected", [((-1.0, 2.0), [3.0, 3.0]), ((-5.0, 6.0), [3.0, 11.0]), ((-17.0, 18.0), [3.0, 35.0])])
def test_abs_forward_hidden_magnitudes(hidden, expected):
    tape = abs_forward(toy_network(hidden), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(tape.output(0), expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_abs_forward_equals_forward_on_nonnegatives(seed):
    rng = np.random.default_rng(seed)
    m = Model([LayerSpec("linear", {"weight": rng.uniform(size=(3, 4)), "bias": rng.uniform(size=3)})], (4,), 3)
    x = rng.uniform(size=4)
    np.testing.assert_allclose(abs_forward(m, x).logits, forward(m, x).logits, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_abs_forward_dominates_forward_for_linear_stacks(seed):
    rng = np.random.default_rng(seed)
    layers = [LayerSpec("linear", {"weight": rng.normal(size=(4, 5)), "bias": rng.normal(size=4)}), LayerSpec("linear", {"weight": rng.normal(size=(2, 4)), "bias": rng.normal(size=2)})]
    m = Model(layers, (5,), 2)
    x = rng.normal(size=5)
    assert np.all(abs_forward(m, x).logits >= np.abs(forward(m, x).logits) - 1e-12)


def test_softmax_rows_sum_to_one():
    s = softmax(np.random.default_rng(0).normal(size=(3, 7)) * 50)
    np.testing.assert_allclose(s.sum(-1), 1.0)
