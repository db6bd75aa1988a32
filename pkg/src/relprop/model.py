"""Models, forward tapes and reverse-mode gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .layers import (
    KERNELS,
    LayerShapeError,
    LayerSpec,
    batchnorm_affine,
    layernorm_stats,
)


@dataclass
class Model:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    n_classes: int
    arch: str = "custom"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.n_classes < 1:
            raise ValueError("a model needs at least one class")
        self.residual_pairs()  # validates nesting

    def residual_pairs(self) -> dict[int, int]:
        """Map residual-end index -> matching residual-begin index."""
        stack, pairs = [], {}
        for i, spec in enumerate(self.layers):
            if spec.kind == "residual-begin":
                stack.append(i)
            elif spec.kind == "residual-end":
                if not stack:
                    raise ValueError(f"layer {i}: residual-end without residual-begin")
                pairs[i] = stack.pop()
        if stack:
            raise ValueError(f"layer {stack[-1]}: residual-begin is never closed")
        return pairs

    def parameters(self):
        for i, spec in enumerate(self.layers):
            for name, value in spec.params.items():
                yield i, name, value


@dataclass(frozen=True)
class Node:
    index: int
    spec: LayerSpec
    inputs: tuple[np.ndarray, ...]
    output: np.ndarray
    cache: dict
    partner: int | None = None


@dataclass(frozen=True)
class Tape:
    model: Model
    input: np.ndarray
    nodes: tuple[Node, ...]
    batched: bool = False

    def output(self, k: int = -1) -> np.ndarray:
        out = self.nodes[k].output if self.nodes else self.input
        return out if self.batched else out[0]

    @property
    def logits(self) -> np.ndarray:
        return self.output(-1)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _run(model: Model, x: np.ndarray, layers, absolute: bool) -> tuple[Node, ...]:
    pairs = model.residual_pairs()
    begins = {b: e for e, b in pairs.items()}
    nodes: list[Node] = []
    cur = x
    for i, spec in enumerate(layers):
        skip = nodes[pairs[i]].output if i in pairs else None
        inp = cur
        if absolute and spec.kind in _ABS_INPUT:
            inp = np.abs(cur)
            skip = None if skip is None else np.abs(skip)
        try:
            out, cache = KERNELS[spec.kind][0](spec, inp, skip)
        except LayerShapeError as exc:
            raise LayerShapeError(str(exc), layer=i) from None
        except ValueError as exc:  # numpy broadcasting failures
            raise LayerShapeError(str(exc), layer=i) from None
        inputs = (inp,) if skip is None else (inp, skip)
        partner = pairs.get(i, begins.get(i))
        nodes.append(Node(i, spec, tuple(_freeze(a) for a in inputs), _freeze(out), cache, partner))
        cur = out
    return tuple(nodes)


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise LayerShapeError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}", layer=0)
    return x


def forward_batch(model: Model, xs: np.ndarray) -> Tape:
    """Forward pass over a leading batch axis."""
    xs = _check_input(model, xs)
    tape = Tape(model, _freeze(xs.copy()), _run(model, xs, model.layers, False), batched=True)
    _check_logits(model, tape)
    return tape


def forward(model: Model, x: np.ndarray) -> Tape:
    """Record one forward pass of ``model`` on a single example."""
    x = np.asarray(x, dtype=np.float64)
    tape = forward_batch(model, x[None])
    return Tape(model, tape.input, tape.nodes, batched=False)


def _check_logits(model: Model, tape: Tape) -> None:
    out = tape.nodes[-1].output if tape.nodes else tape.input
    if out.shape[1:] != (model.n_classes,):
        raise LayerShapeError(
            f"final output shape {out.shape[1:]} is not ({model.n_classes},)", layer=len(model.layers) - 1
        )


def predict(model: Model, xs: np.ndarray) -> np.ndarray:
    """Logits for a batch, without keeping the tape around."""
    return forward_batch(model, xs).output()


def backward(tape: Tape, seed: np.ndarray, params: bool = False, extras: dict | None = None):
    """Reverse traversal of ``tape``.

    Returns the input gradient and, when ``params`` is set, a list with one
    ``{name: grad}`` dict per node.  Kernel side products (e.g. attention-map
    gradients) are written into ``extras`` keyed by node index.
    """
    if not tape.nodes:
        raise ValueError("cannot differentiate an empty tape")
    g = np.asarray(seed, dtype=np.float64)
    if not tape.batched:
        g = g[None]
    if g.shape != tape.nodes[-1].output.shape:
        raise LayerShapeError(f"seed shape {g.shape} does not match output {tape.nodes[-1].output.shape}")
    pending: dict[int, np.ndarray] = {}
    pgrads: list[dict] = [dict() for _ in tape.nodes]
    for node in reversed(tape.nodes):
        kind = node.spec.kind
        if kind == "residual-end":
            pending[node.partner] = g
        elif kind == "residual-begin":
            g = g + pending.pop(node.index)
        g, pg, ex = KERNELS[kind][1](node.spec, node.cache, g)
        if params:
            pgrads[node.index] = pg
        if extras is not None and ex:
            extras[node.index] = ex
    if not tape.batched:
        g = g[0]
    return (g, pgrads) if params else g


def grad(tape: Tape, seed: np.ndarray) -> np.ndarray:
    """Gradient of ``seed . output`` with respect to the tape input."""
    return backward(tape, seed)


# kinds whose input (and parameters) are taken in absolute value by abs_forward
_ABS_INPUT = frozenset(
    {"linear", "conv2d", "patch-embed", "batchnorm", "layernorm", "self-attention", "class-token", "mean-pool", "residual-end"}
)


def abs_layer(spec: LayerSpec, x: np.ndarray | None = None) -> LayerSpec:
    """Copy of ``spec`` with every parameter replaced by its absolute value.

    Normalization layers are first rewritten as their affine stages so the
    absolute value applies to scale and shift separately.
    """
    if spec.kind == "batchnorm":
        p = spec.params
        sigma = np.sqrt(p["var"] + spec.hyper.get("eps", 1e-5))
        # |x|/sigma + |mean|/sigma, then |gamma| y + |beta|: mean=-|mean| flips the sign of the shift
        params = {"gamma": np.abs(p["gamma"]), "beta": np.abs(p["beta"]), "mean": -np.abs(p["mean"]), "var": p["var"]}
        return LayerSpec("batchnorm", params, dict(spec.hyper))
    return spec.with_params({k: np.abs(v) for k, v in spec.params.items()})


def abs_forward(model: Model, x: np.ndarray) -> Tape:
    """Forward pass with absolute parameters and absolute inputs to linear-like nodes."""
    x = np.asarray(x, dtype=np.float64)
    xs = _check_input(model, x[None])
    layers = [_abs_for_forward(s) for s in model.layers]
    return Tape(model, _freeze(xs.copy()), _run(model, xs, layers, True), batched=False)


def _abs_for_forward(spec: LayerSpec) -> LayerSpec:
    if spec.kind == "layernorm":
        return LayerSpec("layernorm", {k: np.abs(v) for k, v in spec.params.items()}, dict(spec.hyper))
    return abs_layer(spec)


# ---------------------------------------------------------------- builders


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def linear_layer(rng, n_in: int, n_out: int, bias_scale: float = 0.0) -> LayerSpec:
    b = rng.normal(0.0, bias_scale, size=n_out) if bias_scale else np.zeros(n_out)
    return LayerSpec("linear", {"weight": _init(rng, (n_out, n_in), n_in), "bias": b})


def conv_layer(rng, c_in, c_out, k=3, stride=1, padding=1, bias_scale=0.0) -> LayerSpec:
    b = rng.normal(0.0, bias_scale, size=c_out) if bias_scale else np.zeros(c_out)
    return LayerSpec(
        "conv2d",
        {"weight": _init(rng, (c_out, c_in, k, k), c_in * k * k), "bias": b},
        {"stride": stride, "padding": padding},
    )


def mlp(sizes: list[int], seed: int = 0, bias_scale: float = 0.0, activation: str = "relu") -> Model:
    """Fully connected net ``sizes[0] -> ... -> sizes[-1]`` with ReLU between layers."""
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(linear_layer(rng, a, b, bias_scale))
        if i < len(sizes) - 2:
            layers.append(LayerSpec(activation))
    return Model(layers, (sizes[0],), sizes[-1], arch="mlp")


def small_cnn(
    input_shape=(1, 28, 28),
    n_classes: int = 10,
    channels=(8, 16),
    hidden: int = 64,
    seed: int = 0,
    bias_scale: float = 0.0,
) -> Model:
    """conv-relu-maxpool blocks followed by a two-layer classifier head."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers: list[LayerSpec] = []
    for co in channels:
        layers += [conv_layer(rng, c, co, bias_scale=bias_scale), LayerSpec("relu"), LayerSpec("maxpool2d", hyper={"kernel": 2})]
        c, h, w = co, h // 2, w // 2
    layers.append(LayerSpec("flatten"))
    layers += [linear_layer(rng, c * h * w, hidden, bias_scale), LayerSpec("relu"), linear_layer(rng, hidden, n_classes, bias_scale)]
    return Model(layers, input_shape, n_classes, arch="cnn")


def _attention_layer(rng, d: int, heads: int, bias_scale: float) -> LayerSpec:
    params = {}
    for n in "qkvo":
        params["w" + n] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        params["b" + n] = rng.normal(0.0, bias_scale, size=d) if bias_scale else np.zeros(d)
    return LayerSpec("self-attention", params, {"heads": heads})


def layernorm_layer(d: int, rng=None, jitter: float = 0.0) -> LayerSpec:
    gamma, beta = np.ones(d), np.zeros(d)
    if rng is not None and jitter:
        gamma = gamma + rng.normal(0, jitter, d)
        beta = beta + rng.normal(0, jitter, d)
    return LayerSpec("layernorm", {"gamma": gamma, "beta": beta}, {"eps": 1e-5})


def tiny_vit(
    input_shape=(1, 28, 28),
    n_classes: int = 10,
    patch: int = 4,
    dim: int = 32,
    depth: int = 2,
    heads: int = 2,
    mlp_dim: int = 64,
    seed: int = 0,
    residual: bool = True,
    bias_scale: float = 0.0,
    jitter: float = 0.0,
) -> Model:
    """Pre-norm vision transformer with a class token."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    n_patches = (h // patch) * (w // patch)
    layers = [
        LayerSpec(
            "patch-embed",
            {"weight": _init(rng, (dim, c, patch, patch), c * patch * patch), "bias": np.zeros(dim)},
        ),
        LayerSpec("class-token", {"cls": rng.normal(0, 0.02, dim), "pos": rng.normal(0, 0.02, (n_patches + 1, dim))}),
    ]
    for _ in range(depth):
        attn = [layernorm_layer(dim, rng, jitter), _attention_layer(rng, dim, heads, bias_scale)]
        ff = [
            layernorm_layer(dim, rng, jitter),
            linear_layer(rng, dim, mlp_dim, bias_scale),
            LayerSpec("gelu"),
            linear_layer(rng, mlp_dim, dim, bias_scale),
        ]
        for block in (attn, ff):
            if residual:
                layers += [LayerSpec("residual-begin"), *block, LayerSpec("residual-end")]
            else:
                layers += block
    layers += [layernorm_layer(dim, rng, jitter), LayerSpec("mean-pool", hyper={"mode": "cls"}), linear_layer(rng, dim, n_classes)]
    return Model(layers, input_shape, n_classes, arch="tiny-vit", meta={"patch": patch})


def toy_network(second_hidden=(-5.0, 6.0)) -> Model:
    """The 2-2-1 toy net: hidden weights [2, -1] and ``second_hidden``, output weights [1, 1].

    ``toy_network((-1, 2))`` is the balanced variant; the default is the
    unbalanced one whose second hidden neuron has large-magnitude weights.
    """
    w1 = np.array([[2.0, -1.0], list(second_hidden)])
    return Model(
        [
            LayerSpec("linear", {"weight": w1, "bias": np.zeros(2)}),
            LayerSpec("relu"),
            LayerSpec("linear", {"weight": np.array([[1.0, 1.0]]), "bias": np.zeros(1)}),
        ],
        (2,),
        1,
        arch="toy",
    )


def fold_layernorm_stats(spec: LayerSpec, x: np.ndarray):
    """Detached layernorm as a per-element affine map: returns (scale, shift)."""
    mu, sigma = layernorm_stats(x, spec.hyper.get("eps", 1e-5))
    scale = spec.params["gamma"] / sigma
    return np.broadcast_to(scale, x.shape), spec.params["beta"] - mu * scale


__all__ = [
    "Model",
    "Node",
    "Tape",
    "forward",
    "forward_batch",
    "backward",
    "grad",
    "abs_forward",
    "abs_layer",
    "predict",
    "mlp",
    "small_cnn",
    "tiny_vit",
    "toy_network",
    "batchnorm_affine",
    "fold_layernorm_stats",
]
