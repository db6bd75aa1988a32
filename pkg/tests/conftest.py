import numpy as np
import pytest

from relprop.layers import LayerSpec
from relprop.model import Model, forward_batch
from relprop.synthetic import make_digits
from relprop.train import fixture_model


def _lin(rng, n_in, n_out, bias=True):
    return LayerSpec("linear", {"weight": rng.normal(size=(n_out, n_in)), "bias": rng.normal(size=n_out) if bias else np.zeros(n_out)})


def _head(rng, shape, n_classes=3):
    return [LayerSpec("flatten"), _lin(rng, int(np.prod(shape)), n_classes)]


def _attention(rng, d, heads, scale=0.5):
    p = {f"w{n}": rng.normal(0, scale, (d, d)) for n in "qkvo"}
    p.update({f"b{n}": rng.normal(0, 0.1, d) for n in "qkvo"})
    return LayerSpec("self-attention", p, {"heads": heads})


def kind_model(kind: str, rng, bias: bool = True) -> Model:
    """A small model whose first layer is ``kind``, followed by flatten + linear."""
    if kind == "linear":
        return Model([_lin(rng, 5, 4, bias), *_head(rng, (4,))], (5,), 3)
    if kind == "conv2d":
        stride, pad = [(1, 1), (2, 0), (1, 0)][int(rng.integers(3))]
        b = rng.normal(size=3) if bias else np.zeros(3)
        conv = LayerSpec("conv2d", {"weight": rng.normal(size=(3, 2, 3, 3)), "bias": b}, {"stride": stride, "padding": pad})
        out = (5 + 2 * pad - 3) // stride + 1
        return Model([conv, *_head(rng, (3, out, out))], (2, 5, 5), 3)
    if kind in ("relu", "gelu", "softmax"):
        return Model([LayerSpec(kind), *_head(rng, (6,))], (6,), 3)
    if kind == "maxpool2d":
        return Model([LayerSpec("maxpool2d", hyper={"kernel": 2}), *_head(rng, (2, 2, 2))], (2, 4, 4), 3)
    if kind == "batchnorm":
        p = {"gamma": rng.normal(size=3), "beta": rng.normal(size=3), "mean": rng.normal(size=3), "var": rng.uniform(0.5, 2, 3)}
        return Model([LayerSpec("batchnorm", p), *_head(rng, (3, 4, 4))], (3, 4, 4), 3)
    if kind == "layernorm":
        p = {"gamma": rng.normal(size=6), "beta": rng.normal(size=6)}
        return Model([LayerSpec("layernorm", p, {"eps": 1e-5}), *_head(rng, (4, 6))], (4, 6), 3)
    if kind == "self-attention":
        return Model([_attention(rng, 8, 2), *_head(rng, (5, 8))], (5, 8), 3)
    if kind in ("residual-begin", "residual-end"):
        layers = [LayerSpec("residual-begin"), _lin(rng, 6, 6, bias), LayerSpec("relu"), _lin(rng, 6, 6, bias), LayerSpec("residual-end")]
        return Model(layers + _head(rng, (6,)), (6,), 3)
    if kind == "flatten":
        return Model(_head(rng, (2, 3, 3)), (2, 3, 3), 3)
    if kind == "patch-embed":
        pe = LayerSpec("patch-embed", {"weight": rng.normal(size=(5, 2, 4, 4)), "bias": rng.normal(size=5)})
        return Model([pe, *_head(rng, (4, 5))], (2, 8, 8), 3)
    if kind == "class-token":
        ct = LayerSpec("class-token", {"cls": rng.normal(size=6), "pos": rng.normal(size=(5, 6))})
        return Model([ct, *_head(rng, (5, 6))], (4, 6), 3)
    if kind == "mean-pool":
        mode = ["spatial", "tokens", "cls"][int(rng.integers(3))]
        shape = (3, 4, 4) if mode == "spatial" else (5, 6)
        out = 3 if mode == "spatial" else 6
        return Model([LayerSpec("mean-pool", hyper={"mode": mode}), _lin(rng, out, 3)], shape, 3)
    raise KeyError(kind)


def central_difference(model: Model, x: np.ndarray, seed: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d(seed . f(x))/dx by central differences, all perturbations in one batch."""
    n = x.size
    eye = np.eye(n).reshape((n,) + x.shape) * h
    out = forward_batch(model, np.concatenate([x + eye, x - eye])).output()
    f = out @ seed
    return ((f[:n] - f[n:]) / (2 * h)).reshape(x.shape)


def rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture(scope="session")
def cnn_fixture():
    """Stock fixture CNN trained on seeded synthetic digits (about 10 s)."""
    return fixture_model("cnn", seed=0)


@pytest.fixture(scope="session")
def vit_fixture():
    """Stock fixture tiny ViT (about a minute)."""
    return fixture_model("tiny-vit", seed=0)


@pytest.fixture(scope="session")
def digit_eval():
    """Held-out digits drawn from a different seed than the training data."""
    return make_digits(400, seed=1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
