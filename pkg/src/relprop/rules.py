"""Layer-wise relevance rules.

Every rule acts on a :class:`LinearView`: an operation ``z = fn(x, w) + bias``
that is linear in the input ``x`` receiving relevance and in the weight
tensor ``w`` (held constant for the pass).  Contributions ``x_i w_ij`` are
never materialized; positive and negative parts come from running ``fn`` on
sign-split operands, and redistribution uses the transpose ``vjp``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import (
    LINEAR_LIKE,
    batchnorm_affine,
    col2im,
    conv2d,
    conv2d_transpose,
    im2col,
    mean_pool_transpose,
    patch_tokens_to_grid,
)
from .model import Node, fold_layernorm_stats

EPS = 1e-9


def _pos(a):
    return np.maximum(a, 0.0)


def _neg(a):
    return np.minimum(a, 0.0)


def _safe_div(num, den):
    out = np.zeros(np.broadcast_shapes(np.shape(num), np.shape(den)))
    nz = den != 0
    np.divide(num, den, out=out, where=nz)
    return out


@dataclass
class LinearView:
    """``fn(x, w) + bias`` with ``vjp(g, w)`` the transpose of ``fn`` in ``x``.

    ``w=None`` marks an operation with implicit nonnegative weights (sums,
    means, selections); then ``fn``/``vjp`` take only one argument.
    """

    x: np.ndarray
    fn: Callable
    vjp: Callable
    w: np.ndarray | None = None
    bias: np.ndarray | float = 0.0

    def apply(self, x, w=None):
        return self.fn(x) if self.w is None else self.fn(x, w)

    def transpose(self, g, w=None):
        return self.vjp(g) if self.w is None else self.vjp(g, w)

    def z(self):
        return self.apply(self.x, self.w) + self.bias

    def parts(self):
        """Sums of positive and of negative contributions per output, bias included."""
        xp, xn = _pos(self.x), _neg(self.x)
        if self.w is None:
            zp, zn = self.fn(xp), self.fn(xn)
        else:
            wp, wn = _pos(self.w), _neg(self.w)
            zp = self.fn(xp, wp) + self.fn(xn, wn)
            zn = self.fn(xp, wn) + self.fn(xn, wp)
        return zp + _pos(self.bias), zn + _neg(self.bias)

    def share_positive(self, s):
        """sum_j (x_i w_ij)^+ s_j"""
        xp, xn = _pos(self.x), _neg(self.x)
        if self.w is None:
            return xp * self.vjp(s)
        return xp * self.vjp(s, _pos(self.w)) + xn * self.vjp(s, _neg(self.w))

    def share_negative(self, s):
        """sum_j (x_i w_ij)^- s_j"""
        xp, xn = _pos(self.x), _neg(self.x)
        if self.w is None:
            return xn * self.vjp(s)
        return xp * self.vjp(s, _neg(self.w)) + xn * self.vjp(s, _pos(self.w))

    def share(self, s):
        """sum_j x_i w_ij s_j"""
        return self.x * self.transpose(s, self.w)


# ---------------------------------------------------------------- rules


class Rule:
    name = "rule"

    def linear(self, view: LinearView, rel: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def elementwise(self, y: np.ndarray, rel: np.ndarray) -> np.ndarray:
        """Single-input neurons (activations, detached softmax): relevance passes through."""
        return rel


class AbsLRP(Rule):
    """Positive contributions normalized by the absolute pre-activation."""

    name = "abslrp"

    def __init__(self, epsilon: float = EPS):
        self.epsilon = epsilon

    def linear(self, view, rel):
        s = rel / (np.abs(view.z()) + self.epsilon)
        return view.share_positive(s)


class EpsilonRule(Rule):
    name = "lrp-eps"

    def __init__(self, epsilon: float = EPS):
        self.epsilon = epsilon

    def linear(self, view, rel):
        return view.share(rel / (view.z() + self.epsilon))


class AlphaBetaRule(Rule):
    name = "lrp-alphabeta"

    def __init__(self, alpha: float = 1.0, beta: float = 0.0):
        self.alpha, self.beta = alpha, beta

    def linear(self, view, rel):
        zp, zn = view.parts()
        out = self.alpha * view.share_positive(_safe_div(rel, zp))
        if self.beta:
            out = out - self.beta * view.share_negative(_safe_div(rel, zn))
        return out


class RAPRule(Rule):
    """Sign-split propagation weighted by relative absolute magnitude, then mean shift."""

    name = "rap"

    def linear(self, view, rel):
        zp, zn = view.parts()
        # alpha (xw)^+/zp + beta (xw)^-/zn with alpha = zp/D, beta = zn/D collapses to xw/D
        out = view.share(_safe_div(rel, zp - zn))
        return mean_shift(out)


def mean_shift(rel: np.ndarray) -> np.ndarray:
    """Subtract, per example, the mean of the non-zero relevances from each of them."""
    out = rel.copy()
    flat = out.reshape(out.shape[0], -1)
    nz = flat != 0
    counts = nz.sum(axis=1)
    means = _safe_div(np.where(nz, flat, 0.0).sum(axis=1), counts)
    flat -= np.where(nz, means[:, None], 0.0)
    return out


# ---------------------------------------------------------------- node views


def _linear_view(x, weight, bias):
    return LinearView(x, lambda a, w: a @ w.T, lambda g, w: g @ w, weight, bias)


def _conv_view(x, weight, bias, stride, pad):
    shape = x.shape
    return LinearView(
        x,
        lambda a, w: conv2d(a, w, stride, pad)[0],
        lambda g, w: conv2d_transpose(g, w, shape, stride, pad),
        weight,
        bias.reshape(1, -1, 1, 1),
    )


def _patch_view(node: Node):
    x = node.inputs[0]
    w, b = node.spec.params["weight"], node.spec.params["bias"]
    p, grid, shape = w.shape[2], node.cache["grid"], x.shape

    def fn(a, wt):
        y = conv2d(a, wt, p, 0)[0]
        return y.reshape(y.shape[0], y.shape[1], -1).transpose(0, 2, 1)

    def vjp(g, wt):
        return conv2d_transpose(patch_tokens_to_grid(g, grid), wt, shape, p, 0)

    return LinearView(x, fn, vjp, w, b)


def _diag_view(x, scale, shift):
    return LinearView(x, lambda a, w: a * w, lambda g, w: g * w, np.broadcast_to(scale, x.shape), shift)


def _add_view(x, other):
    return LinearView(x, lambda a: a, lambda g: g, None, other)


def node_views(node: Node):
    """Linear views of a single-stage linear-like node, in backward order."""
    spec, x = node.spec, node.inputs[0]
    kind = spec.kind
    if kind == "linear":
        return [_linear_view(x, spec.params["weight"], spec.params["bias"])]
    if kind == "conv2d":
        return [
            _conv_view(x, spec.params["weight"], spec.params["bias"], spec.hyper.get("stride", 1), spec.hyper.get("padding", 0))
        ]
    if kind == "patch-embed":
        return [_patch_view(node)]
    if kind == "batchnorm":
        (s1, t1), (s2, t2) = batchnorm_affine(spec, x)
        xhat = x * s1 + t1
        return [_diag_view(xhat, s2, t2), _diag_view(x, s1, t1)]
    if kind == "layernorm":
        scale, shift = fold_layernorm_stats(spec, x)
        return [_diag_view(x, scale, shift)]
    if kind == "mean-pool":
        shape = x.shape
        fwd = node.spec
        return [
            LinearView(
                x,
                lambda a: _mean_pool(fwd, a),
                lambda g: mean_pool_transpose(fwd, g, shape),
            )
        ]
    if kind == "class-token":
        cls, pos = spec.params["cls"], spec.params["pos"]
        bias = pos.copy()
        bias[0] += cls
        return [
            LinearView(
                x,
                lambda a: np.concatenate([np.zeros((a.shape[0], 1, a.shape[2])), a], axis=1),
                lambda g: g[:, 1:],
                None,
                bias,
            )
        ]
    raise ValueError(f"no single-stage linear view for {kind}")


def _mean_pool(spec, a):
    mode = spec.hyper.get("mode", "spatial")
    if mode == "cls":
        return a[:, 0]
    if mode == "tokens":
        return a.mean(axis=1)
    return a.reshape(a.shape[0], a.shape[1], -1).mean(axis=2)


def _check_rel(node: Node, rel: np.ndarray):
    if rel.shape != node.output.shape:
        raise ValueError(f"relevance shape {rel.shape} does not match node output {node.output.shape}")


def propagate_linear(rule: Rule, node: Node, rel: np.ndarray) -> np.ndarray:
    for view in node_views(node):
        rel = rule.linear(view, rel)
    return rel


# ---------------------------------------------------------------- per-layer absLRP entry points


def _batched(node: Node, rel: np.ndarray):
    rel = np.asarray(rel, dtype=np.float64)
    single = rel.ndim == node.output.ndim - 1
    return (rel[None] if single else rel), single


def abslrp_layer(rel_next: np.ndarray, node: Node, epsilon: float = EPS) -> np.ndarray:
    """Previous-layer relevance of a linear-like node under the absolute-magnitude rule."""
    rel, single = _batched(node, rel_next)
    _check_rel(node, rel)
    out = propagate_linear(AbsLRP(epsilon), node, rel)
    return out[0] if single else out


def lrp_epsilon_layer(rel_next, node: Node, epsilon: float = EPS):
    rel, single = _batched(node, rel_next)
    _check_rel(node, rel)
    out = propagate_linear(EpsilonRule(epsilon), node, rel)
    return out[0] if single else out


def lrp_alphabeta_layer(rel_next, node: Node, alpha: float = 1.0, beta: float = 0.0):
    if abs(alpha - beta - 1.0) > 1e-12:
        raise ValueError("alpha - beta must equal 1")
    rel, single = _batched(node, rel_next)
    _check_rel(node, rel)
    out = propagate_linear(AlphaBetaRule(alpha, beta), node, rel)
    return out[0] if single else out


def rap_layer(rel_next, node: Node, shift: bool = True):
    rel, single = _batched(node, rel_next)
    _check_rel(node, rel)
    out = rel
    for view in node_views(node):
        zp, zn = view.parts()
        out = view.share(_safe_div(out, zp - zn))
        if shift:
            out = mean_shift(out)
    return out[0] if single else out


def abslrp_layer_autodiff(rel_next, node: Node, epsilon: float = EPS) -> np.ndarray:
    """The same rule obtained by differentiating ``h + h_abs`` through the layer kernel.

    ``h_abs`` is the layer with absolute parameters applied to the absolute
    input.  ``d(h + h_abs)/dx * x`` equals twice the positive contribution,
    so the result is halved.
    """
    from .layers import KERNELS
    from .model import abs_layer

    rel, single = _batched(node, rel_next)
    _check_rel(node, rel)
    if node.spec.kind not in ("linear", "conv2d", "patch-embed"):
        raise ValueError("autodiff form is provided for linear, conv2d and patch-embed nodes")
    fwd, bwd = KERNELS[node.spec.kind]
    x = np.asarray(node.inputs[0])
    h, cache = fwd(node.spec, x, None)
    aspec = abs_layer(node.spec)
    _, acache = fwd(aspec, np.abs(x), None)
    scaling = rel / (np.abs(h) + epsilon)
    g_h = bwd(node.spec, cache, scaling)[0]
    g_abs = bwd(aspec, acache, scaling)[0] * np.sign(x)  # chain rule through |x|
    out = 0.5 * (g_h + g_abs) * x
    return out[0] if single else out


def abslrp_layer_explicit(rel_next, node: Node, epsilon: float = EPS) -> np.ndarray:
    """Reference form that materializes every contribution x_i w_ij (linear and conv2d only)."""
    rel, single = _batched(node, rel_next)
    _check_rel(node, rel)
    spec, x = node.spec, np.asarray(node.inputs[0])
    w, b = spec.params["weight"], spec.params["bias"]
    if spec.kind == "linear":
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1])
        r2 = rel.reshape(-1, rel.shape[-1])
        contrib = x2[:, :, None] * w.T[None]  # (rows, in, out)
        z = contrib.sum(axis=1) + b
        out = (np.maximum(contrib, 0) / (np.abs(z) + epsilon)[:, None, :] * r2[:, None, :]).sum(axis=2)
        out = out.reshape(*lead, x.shape[-1])
    elif spec.kind == "conv2d":
        stride, pad = spec.hyper.get("stride", 1), spec.hyper.get("padding", 0)
        co, _, kh, kw = w.shape
        cols = im2col(x, kh, kw, stride, pad)  # (B, K, L)
        wm = w.reshape(co, -1)  # (O, K)
        contrib = cols[:, :, None, :] * wm.T[None, :, :, None]  # (B, K, O, L)
        z = contrib.sum(axis=1) + b[None, :, None]
        r = rel.reshape(rel.shape[0], co, -1)
        rcols = (np.maximum(contrib, 0) / (np.abs(z) + epsilon)[:, None] * r[:, None]).sum(axis=2)
        out = col2im(rcols, x.shape, kh, kw, stride, pad)
    else:
        raise ValueError("explicit form is provided for linear and conv2d nodes")
    return out[0] if single else out


RULES = {
    "abslrp": AbsLRP,
    "lrp-eps": EpsilonRule,
    "lrp-alphabeta": AlphaBetaRule,
    "rap": RAPRule,
}

__all__ = [
    "LinearView",
    "Rule",
    "AbsLRP",
    "EpsilonRule",
    "AlphaBetaRule",
    "RAPRule",
    "mean_shift",
    "node_views",
    "propagate_linear",
    "abslrp_layer",
    "abslrp_layer_autodiff",
    "abslrp_layer_explicit",
    "lrp_epsilon_layer",
    "lrp_alphabeta_layer",
    "rap_layer",
    "LINEAR_LIKE",
]
