"""Attribution methods: LRP-family rules plus gradient and attention baselines."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .layers import maxpool_route, merge_heads, split_heads
from .model import Model, Node, Tape, backward, forward_batch
from .rules import (
    EPS,
    AbsLRP,
    AlphaBetaRule,
    EpsilonRule,
    LinearView,
    RAPRule,
    Rule,
    _add_view,
    _linear_view,
    propagate_linear,
)

LRP_METHODS = ("abslrp", "lrp-eps", "lrp-alphabeta", "rap", "crap", "clrp")
GRADIENT_METHODS = ("saliency", "input-x-gradient")
ATTENTION_METHODS = ("rollout", "tibav")
REFERENCE_METHODS = ("constant", "random")
METHODS = LRP_METHODS + GRADIENT_METHODS + ATTENTION_METHODS + REFERENCE_METHODS
ABLATIONS = ("none", "patch-stop", "value-only", "qk-only")

_CONTRASTIVE_BY_DEFAULT = {"abslrp", "crap", "clrp"}


@dataclass(frozen=True)
class MethodConfig:
    method: str = "abslrp"
    epsilon: float = EPS
    alpha: float = 1.0
    beta: float = 0.0
    contrastive: bool | None = None
    ablation: str = "none"
    renormalize: bool = True  # rollout rows
    seed: int = 0  # "random" reference method

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.method == "lrp-alphabeta" and (self.alpha < 1 or abs(self.alpha - self.beta - 1) > 1e-12):
            raise ValueError("lrp-alphabeta needs alpha >= 1 and beta = alpha - 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    @property
    def is_contrastive(self) -> bool:
        if self.method in ("crap", "clrp"):
            return True
        if self.contrastive is None:
            return self.method in _CONTRASTIVE_BY_DEFAULT
        return self.contrastive

    @property
    def label(self) -> str:
        name = self.method
        if self.method == "lrp-alphabeta":
            name = f"lrp-a{self.alpha:g}b{self.beta:g}"
        if self.ablation != "none":
            name += f"[{self.ablation}]"
        if self.contrastive is not None and self.contrastive != (self.method in _CONTRASTIVE_BY_DEFAULT):
            name += "+contrastive" if self.contrastive else "+noncontrastive"
        return name

    def rule(self) -> Rule:
        if self.method == "abslrp":
            return AbsLRP(self.epsilon)
        if self.method == "lrp-eps":
            return EpsilonRule(self.epsilon)
        if self.method == "lrp-alphabeta":
            return AlphaBetaRule(self.alpha, self.beta)
        if self.method == "clrp":
            return AlphaBetaRule(1.0, 0.0)
        if self.method in ("rap", "crap"):
            return RAPRule()
        raise ValueError(f"{self.method} is not an LRP method")


def parse_method(text: str, **overrides) -> MethodConfig:
    """``"lrp-alphabeta:2,1"`` style shorthand used by the CLI."""
    name, _, args = text.partition(":")
    if name == "lrp-alphabeta" and args:
        a, b = (float(v) for v in args.split(","))
        overrides.update(alpha=a, beta=b)
    return MethodConfig(method=name, **overrides)


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray
    method: str
    target: int


def init_relevance(logits: np.ndarray, target: int, contrastive: bool = False) -> np.ndarray:
    """Relevance seed over the output classes."""
    n = np.shape(logits)[-1]
    if not 0 <= target < n:
        raise ValueError(f"target {target} out of range for {n} classes")
    rel = np.full(n, -1.0 / n) if contrastive else np.zeros(n)
    rel[target] = 1.0
    return rel


# ---------------------------------------------------------------- LRP backward pass


def _swap(a):
    return a.swapaxes(-1, -2)


def _attention_relevance(rule: Rule, node: Node, rel, qk=True, values=True, record=None):
    p, c = node.spec.params, node.cache
    heads = node.spec.hyper.get("heads", 1)
    x, q, k, v, attn, scale = c["x"], c["q"], c["k"], c["v"], c["attn"], c["scale"]
    r_o = split_heads(rule.linear(_linear_view(c["o"], p["wo"], p["bo"]), rel), heads)
    r_x = np.zeros_like(x)
    if values:
        v_view = LinearView(v, lambda a, w: w @ a, lambda g, w: _swap(w) @ g, attn)
        r_v = merge_heads(rule.linear(v_view, r_o))
        r_x = r_x + rule.linear(_linear_view(x, p["wv"], p["bv"]), r_v)
    if qk or record is not None:
        a_view = LinearView(attn, lambda a, w: a @ w, lambda g, w: g @ _swap(w), v)
        r_attn = rule.linear(a_view, r_o)
        if record is not None:
            record[node.index] = r_attn
    if qk:
        # softmax with its normalizer detached is elementwise
        r_s = rule.elementwise(attn, r_attn)
        q_view = LinearView(q, lambda a, w: a @ _swap(w) * scale, lambda g, w: g @ w * scale, k)
        k_view = LinearView(k, lambda a, w: w @ _swap(a) * scale, lambda g, w: _swap(g) @ w * scale, q)
        r_q = merge_heads(rule.linear(q_view, r_s))
        r_k = merge_heads(rule.linear(k_view, r_s))
        r_x = r_x + rule.linear(_linear_view(x, p["wq"], p["bq"]), r_q)
        r_x = r_x + rule.linear(_linear_view(x, p["wk"], p["bk"]), r_k)
    return r_x


def _patch_level(node: Node, rel: np.ndarray) -> np.ndarray:
    """Spread each patch token's total relevance uniformly over its pixels."""
    p = node.spec.params["weight"].shape[2]
    gh, gw = node.cache["grid"]
    b, c = rel.shape[0], node.inputs[0].shape[1]
    per_patch = rel.sum(axis=-1).reshape(b, gh, gw)
    up = per_patch.repeat(p, axis=1).repeat(p, axis=2)
    return np.broadcast_to(up[:, None], (b, c) + up.shape[1:]).copy()


def lrp_backward(
    tape: Tape,
    rel: np.ndarray,
    rule: Rule,
    ablation: str = "none",
    record: dict | None = None,
    qk: bool | None = None,
    values: bool | None = None,
) -> np.ndarray:
    """Propagate output relevance ``rel`` (batched) down to the input."""
    if qk is None:
        qk = ablation != "value-only"
    if values is None:
        values = ablation != "qk-only"
    pending: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        kind = node.spec.kind
        if kind == "residual-end":
            branch, skip = node.inputs
            pending[node.partner] = rule.linear(_add_view(skip, branch), rel)
            rel = rule.linear(_add_view(branch, skip), rel)
        elif kind == "residual-begin":
            rel = rel + pending.pop(node.index)
        elif kind in ("relu", "gelu", "softmax"):
            rel = rule.elementwise(node.output, rel)
        elif kind == "maxpool2d":
            rel = maxpool_route(node.spec, node.cache, rel)
        elif kind == "flatten":
            rel = rel.reshape(node.inputs[0].shape)
        elif kind == "self-attention":
            rel = _attention_relevance(rule, node, rel, qk, values, record)
        elif kind == "patch-embed" and ablation == "patch-stop":
            rel = _patch_level(node, rel)
        else:
            rel = propagate_linear(rule, node, rel)
    return rel


# ---------------------------------------------------------------- dispatch


def _targets(targets, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(targets, dtype=int), (n,))
    return t


def attribute_batch(model: Model, xs: np.ndarray, targets, config: MethodConfig | None = None) -> np.ndarray:
    """Attribution maps for a batch of inputs; returns an array shaped like ``xs``."""
    config = config or MethodConfig()
    xs = np.asarray(xs, dtype=np.float64)
    targets = _targets(targets, xs.shape[0])
    m = config.method
    if m == "constant":
        return np.ones_like(xs)
    if m == "random":
        out = np.empty_like(xs)
        for i, x in enumerate(xs):
            rng = np.random.default_rng([config.seed, zlib.crc32(x.tobytes()), int(targets[i])])
            out[i] = rng.normal(size=x.shape)
        return out
    tape = forward_batch(model, xs)
    if m in GRADIENT_METHODS:
        g = backward(tape, _onehots(targets, model.n_classes))
        return np.abs(g) if m == "saliency" else xs * g
    if m == "rollout":
        return rollout(tape, renormalize=config.renormalize).values
    if m == "tibav":
        return tibav(tape, targets).values
    seeds = np.stack([init_relevance(tape.nodes[-1].output[i], t, config.is_contrastive) for i, t in enumerate(targets)])
    return lrp_backward(tape, seeds, config.rule(), config.ablation)


def attribute(model: Model, x: np.ndarray, target: int, config: MethodConfig | None = None) -> AttributionMap:
    """Attribution map of a single input for class ``target``."""
    config = config or MethodConfig()
    if not 0 <= target < model.n_classes:
        raise ValueError(f"target {target} out of range for {model.n_classes} classes")
    values = attribute_batch(model, np.asarray(x, dtype=np.float64)[None], [target], config)[0]
    return AttributionMap(values, config.label, int(target))


def _onehots(targets, n):
    out = np.zeros((len(targets), n))
    out[np.arange(len(targets)), targets] = 1.0
    return out


def gradient_baselines(model: Model, x: np.ndarray, target: int, kind: str = "saliency") -> AttributionMap:
    if kind not in GRADIENT_METHODS:
        raise ValueError(f"kind must be one of {GRADIENT_METHODS}")
    return attribute(model, x, target, MethodConfig(method=kind))


# ---------------------------------------------------------------- attention rollouts


def _attention_nodes(tape: Tape) -> list[Node]:
    nodes = [n for n in tape.nodes if n.spec.kind == "self-attention"]
    if not nodes:
        raise ValueError("model has no self-attention blocks")
    return nodes


def _patch_node(tape: Tape) -> Node:
    for n in tape.nodes:
        if n.spec.kind == "patch-embed":
            return n
    raise ValueError("rollout needs a patch-embed layer to map tokens to pixels")


def rollout_product(mats: list[np.ndarray], renormalize: bool = True) -> np.ndarray:
    """``(I + A_B) ... (I + A_1)`` over (B, n, n) head-averaged maps, first block rightmost."""
    b, n, _ = mats[0].shape
    joint = np.broadcast_to(np.eye(n), (b, n, n)).copy()
    for a in mats:
        hat = np.eye(n) + a
        if renormalize:
            hat = hat / hat.sum(axis=-1, keepdims=True)
        joint = hat @ joint
    return joint


def _class_row_to_input(tape: Tape, joint: np.ndarray) -> np.ndarray:
    pe = _patch_node(tape)
    p = pe.spec.params["weight"].shape[2]
    gh, gw = pe.cache["grid"]
    b = joint.shape[0]
    row = joint[:, 0, 1:].reshape(b, gh, gw)
    up = row.repeat(p, axis=1).repeat(p, axis=2)
    c = tape.input.shape[1]
    return np.broadcast_to(up[:, None], (b, c) + up.shape[1:]).copy()


def _unbatch(tape: Tape, values: np.ndarray) -> np.ndarray:
    return values if tape.batched else values[0]


def rollout(tape: Tape, renormalize: bool = True) -> AttributionMap:
    mats = [n.cache["attn"].mean(axis=1) for n in _attention_nodes(tape)]
    joint = rollout_product(mats, renormalize)
    return AttributionMap(_unbatch(tape, _class_row_to_input(tape, joint)), "rollout", -1)


def tibav(tape: Tape, target, renormalize: bool = False) -> AttributionMap:
    """Rollout of head-averaged positive (gradient x LRP-eps relevance) of each attention map."""
    nodes = _attention_nodes(tape)
    b = tape.nodes[-1].output.shape[0]
    targets = _targets(target, b)
    extras: dict = {}
    seeds = _onehots(targets, tape.model.n_classes)
    backward(Tape(tape.model, tape.input, tape.nodes, batched=True), seeds, extras=extras)
    record: dict = {}
    lrp_backward(tape, seeds, EpsilonRule(1e-9), record=record)
    mats = [np.maximum(extras[n.index]["attn_grad"] * record[n.index], 0).mean(axis=1) for n in nodes]
    joint = rollout_product(mats, renormalize)
    first = int(targets[0])
    return AttributionMap(_unbatch(tape, _class_row_to_input(tape, joint)), "tibav", first)


def with_method(config: MethodConfig, **changes) -> MethodConfig:
    return replace(config, **changes)
