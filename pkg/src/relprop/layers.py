"""Layer specifications and their numerical kernels.

Every kernel works on arrays with a leading batch axis.  A kernel is a pair
``forward(spec, x, skip) -> (y, cache)`` and
``backward(spec, cache, g) -> (gx, param_grads, extras)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

KINDS = (
    "linear",
    "conv2d",
    "relu",
    "gelu",
    "maxpool2d",
    "softmax",
    "batchnorm",
    "layernorm",
    "self-attention",
    "residual-begin",
    "residual-end",
    "flatten",
    "patch-embed",
    "class-token",
    "mean-pool",
)

# kinds whose relevance rule treats them as x_i * w_ij (+ bias)
LINEAR_LIKE = frozenset(
    {
        "linear",
        "conv2d",
        "patch-embed",
        "batchnorm",
        "layernorm",
        "self-attention",
        "class-token",
        "mean-pool",
        "residual-end",
    }
)

GELU_C = math.sqrt(2.0 / math.pi)


class LayerShapeError(ValueError):
    """Input to a layer does not match the layer's parameters."""

    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)


@dataclass
class LayerSpec:
    kind: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    hyper: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        _VALIDATORS.get(self.kind, _no_check)(self)

    def with_params(self, params: dict[str, np.ndarray]) -> "LayerSpec":
        return LayerSpec(self.kind, params, dict(self.hyper))


def _need(spec: LayerSpec, *names: str) -> None:
    missing = [n for n in names if n not in spec.params]
    if missing:
        raise ValueError(f"{spec.kind} layer missing parameters {missing}")


def _no_check(spec: LayerSpec) -> None:
    pass


def _check_linear(spec):
    _need(spec, "weight", "bias")
    w, b = spec.params["weight"], spec.params["bias"]
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ValueError(f"linear weight {w.shape} / bias {b.shape} inconsistent")


def _check_conv(spec):
    _need(spec, "weight", "bias")
    w, b = spec.params["weight"], spec.params["bias"]
    if w.ndim != 4 or b.shape != (w.shape[0],):
        raise ValueError(f"{spec.kind} weight {w.shape} / bias {b.shape} inconsistent")
    if spec.kind == "patch-embed" and w.shape[2] != w.shape[3]:
        raise ValueError("patch-embed needs square patches")


def _check_batchnorm(spec):
    _need(spec, "gamma", "beta", "mean", "var")
    shapes = {v.shape for v in spec.params.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 1:
        raise ValueError("batchnorm parameters must be equal-length vectors")
    if np.any(spec.params["var"] <= 0):
        raise ValueError("batchnorm variance must be strictly positive")


def _check_layernorm(spec):
    _need(spec, "gamma", "beta")
    if spec.params["gamma"].shape != spec.params["beta"].shape:
        raise ValueError("layernorm gamma/beta shapes differ")


def _check_attention(spec):
    names = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")
    _need(spec, *names)
    d = spec.params["wq"].shape[0]
    for n in names:
        want = (d, d) if n.startswith("w") else (d,)
        if spec.params[n].shape != want:
            raise ValueError(f"attention {n} has shape {spec.params[n].shape}, want {want}")
    heads = spec.hyper.get("heads", 1)
    if d % heads:
        raise ValueError(f"model width {d} not divisible by {heads} heads")


def _check_class_token(spec):
    _need(spec, "cls", "pos")
    cls, pos = spec.params["cls"], spec.params["pos"]
    if cls.ndim != 1 or pos.ndim != 2 or pos.shape[1] != cls.shape[0]:
        raise ValueError("class-token cls/pos shapes inconsistent")


_VALIDATORS = {
    "linear": _check_linear,
    "conv2d": _check_conv,
    "patch-embed": _check_conv,
    "batchnorm": _check_batchnorm,
    "layernorm": _check_layernorm,
    "self-attention": _check_attention,
    "class-token": _check_class_token,
}


# ---------------------------------------------------------------- im2col


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """(B, C, H, W) -> (B, C*kh*kw, Ho*Wo) patch matrix."""
    b, c, h, w = x.shape
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise LayerShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back onto the image."""
    b, c, h, w = x_shape
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out[:, :, pad : pad + h, pad : pad + w]


def conv2d(x, weight, stride=1, pad=0):
    """Bias-free convolution as im2col + matmul; returns (y, cols)."""
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise LayerShapeError(f"conv expects (B, {weight.shape[1]}, H, W) input, got {x.shape}")
    co, _, kh, kw = weight.shape
    cols = im2col(x, kh, kw, stride, pad)
    ho = conv_out_size(x.shape[2], kh, stride, pad)
    wo = conv_out_size(x.shape[3], kw, stride, pad)
    y = np.matmul(weight.reshape(co, -1), cols)
    return y.reshape(x.shape[0], co, ho, wo), cols


def conv2d_transpose(g, weight, x_shape, stride=1, pad=0):
    """Vector-Jacobian product of :func:`conv2d` with respect to its input."""
    co, _, kh, kw = weight.shape
    gm = g.reshape(g.shape[0], co, -1)
    dcols = np.matmul(weight.reshape(co, -1).T, gm)
    return col2im(dcols, x_shape, kh, kw, stride, pad)


# ---------------------------------------------------------------- helpers


def channel_view(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reshape a per-channel vector to broadcast against (B, C, ...)."""
    return v.reshape((1, v.shape[0]) + (1,) * (x.ndim - 2))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(GELU_C * x * (1.0 + 0.044715 * x * x))


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(t: np.ndarray) -> np.ndarray:
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def layernorm_stats(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    return mu, sigma


def batchnorm_affine(spec: LayerSpec, x: np.ndarray):
    """Per-channel (scale, shift) pairs of the two stages: normalize, then gamma/beta."""
    p = spec.params
    sigma = np.sqrt(p["var"] + spec.hyper.get("eps", 1e-5))
    return (
        (channel_view(1.0 / sigma, x), channel_view(-p["mean"] / sigma, x)),
        (channel_view(p["gamma"], x), channel_view(p["beta"], x)),
    )


def _sum_leading(a: np.ndarray, keep: int) -> np.ndarray:
    return a.reshape(-1, *a.shape[a.ndim - keep :]).sum(axis=0)


# ---------------------------------------------------------------- kernels


def _linear_fwd(spec, x, skip):
    w, b = spec.params["weight"], spec.params["bias"]
    if x.shape[-1] != w.shape[1]:
        raise LayerShapeError(f"linear expects last dim {w.shape[1]}, got input {x.shape}")
    return x @ w.T + b, {"x": x}


def _linear_bwd(spec, cache, g):
    w, x = spec.params["weight"], cache["x"]
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return g @ w, {"weight": g2.T @ x2, "bias": g2.sum(axis=0)}, {}


def _conv_fwd(spec, x, skip):
    stride, pad = spec.hyper.get("stride", 1), spec.hyper.get("padding", 0)
    y, cols = conv2d(x, spec.params["weight"], stride, pad)
    return y + channel_view(spec.params["bias"], y), {"x_shape": x.shape, "cols": cols}


def _conv_bwd(spec, cache, g):
    w = spec.params["weight"]
    stride, pad = spec.hyper.get("stride", 1), spec.hyper.get("padding", 0)
    gm = g.reshape(g.shape[0], w.shape[0], -1)
    dw = np.einsum("bol,bkl->ok", gm, cache["cols"]).reshape(w.shape)
    gx = conv2d_transpose(g, w, cache["x_shape"], stride, pad)
    return gx, {"weight": dw, "bias": gm.sum(axis=(0, 2))}, {}


def _patch_fwd(spec, x, skip):
    p = spec.params["weight"].shape[2]
    if x.ndim != 4 or x.shape[2] % p or x.shape[3] % p:
        raise LayerShapeError(f"patch-embed with patch {p} cannot tile input {x.shape}")
    y, cols = conv2d(x, spec.params["weight"], p, 0)
    b, d = y.shape[:2]
    tokens = y.reshape(b, d, -1).transpose(0, 2, 1) + spec.params["bias"]
    return tokens, {"x_shape": x.shape, "cols": cols, "grid": y.shape[2:]}


def patch_tokens_to_grid(g: np.ndarray, grid) -> np.ndarray:
    b, n, d = g.shape
    return g.transpose(0, 2, 1).reshape(b, d, *grid)


def _patch_bwd(spec, cache, g):
    gy = patch_tokens_to_grid(g, cache["grid"])
    w = spec.params["weight"]
    gm = gy.reshape(gy.shape[0], w.shape[0], -1)
    dw = np.einsum("bol,bkl->ok", gm, cache["cols"]).reshape(w.shape)
    gx = conv2d_transpose(gy, w, cache["x_shape"], w.shape[2], 0)
    return gx, {"weight": dw, "bias": g.reshape(-1, g.shape[-1]).sum(axis=0)}, {}


def _relu_fwd(spec, x, skip):
    return np.maximum(x, 0.0), {"x": x}


def _relu_bwd(spec, cache, g):
    return g * (cache["x"] > 0), {}, {}


def _gelu_fwd(spec, x, skip):
    t = _gelu_tanh(x)
    return 0.5 * x * (1.0 + t), {"x": x, "t": t}


def _gelu_bwd(spec, cache, g):
    x, t = cache["x"], cache["t"]
    d = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * GELU_C * (1 + 3 * 0.044715 * x * x)
    return g * d, {}, {}


def _maxpool_fwd(spec, x, skip):
    k = spec.hyper.get("kernel", 2)
    s = spec.hyper.get("stride", k)
    if x.ndim != 4:
        raise LayerShapeError(f"maxpool2d expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    cols = im2col(x.reshape(b * c, 1, h, w), k, k, s, 0)  # (B*C, k*k, L)
    # argmax returns the first maximum: lowest flat index within each window
    idx = cols.argmax(axis=1)
    y = np.take_along_axis(cols, idx[:, None, :], axis=1)[:, 0]
    ho, wo = conv_out_size(h, k, s, 0), conv_out_size(w, k, s, 0)
    return y.reshape(b, c, ho, wo), {"x_shape": x.shape, "idx": idx}


def maxpool_route(spec, cache, g):
    """Send each output value back to the argmax position of its window."""
    k = spec.hyper.get("kernel", 2)
    s = spec.hyper.get("stride", k)
    b, c, h, w = cache["x_shape"]
    idx = cache["idx"]
    cols = np.zeros((b * c, k * k, idx.shape[1]))
    np.put_along_axis(cols, idx[:, None, :], g.reshape(b * c, 1, -1), axis=1)
    return col2im(cols, (b * c, 1, h, w), k, k, s, 0).reshape(b, c, h, w)


def _maxpool_bwd(spec, cache, g):
    return maxpool_route(spec, cache, g), {}, {}


def _softmax_fwd(spec, x, skip):
    y = softmax(x)
    return y, {"y": y}


def _softmax_bwd(spec, cache, g):
    y = cache["y"]
    return y * (g - (g * y).sum(axis=-1, keepdims=True)), {}, {}


def _batchnorm_fwd(spec, x, skip):
    if x.ndim < 2 or x.shape[1] != spec.params["gamma"].shape[0]:
        raise LayerShapeError(f"batchnorm over {spec.params['gamma'].shape[0]} channels got {x.shape}")
    (s1, t1), (s2, t2) = batchnorm_affine(spec, x)
    xhat = x * s1 + t1
    return xhat * s2 + t2, {"xhat": xhat, "x": x}


def _batchnorm_bwd(spec, cache, g):
    (s1, _), (s2, _) = batchnorm_affine(spec, cache["x"])
    axes = (0,) + tuple(range(2, g.ndim))
    grads = {"gamma": (g * cache["xhat"]).sum(axis=axes), "beta": g.sum(axis=axes)}
    return g * s2 * s1, grads, {}


def _layernorm_fwd(spec, x, skip):
    if x.shape[-1] != spec.params["gamma"].shape[0]:
        raise LayerShapeError(f"layernorm over {spec.params['gamma'].shape[0]} got {x.shape}")
    mu, sigma = layernorm_stats(x, spec.hyper.get("eps", 1e-5))
    xhat = (x - mu) / sigma
    return xhat * spec.params["gamma"] + spec.params["beta"], {"x": x, "mu": mu, "sigma": sigma, "xhat": xhat}


def _layernorm_bwd(spec, cache, g):
    xhat, sigma = cache["xhat"], cache["sigma"]
    gh = g * spec.params["gamma"]
    gx = (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) / sigma
    grads = {"gamma": _sum_leading(g * xhat, 1), "beta": _sum_leading(g, 1)}
    return gx, grads, {}


def _attention_fwd(spec, x, skip):
    p = spec.params
    d = p["wq"].shape[0]
    if x.ndim != 3 or x.shape[-1] != d:
        raise LayerShapeError(f"self-attention expects (B, n, {d}), got {x.shape}")
    heads = spec.hyper.get("heads", 1)
    q = split_heads(x @ p["wq"].T + p["bq"], heads)
    k = split_heads(x @ p["wk"].T + p["bk"], heads)
    v = split_heads(x @ p["wv"].T + p["bv"], heads)
    scale = 1.0 / math.sqrt(d // heads)
    attn = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    o = merge_heads(attn @ v)
    y = o @ p["wo"].T + p["bo"]
    return y, {"x": x, "q": q, "k": k, "v": v, "attn": attn, "o": o, "scale": scale}


def _attention_bwd(spec, cache, g):
    p = spec.params
    heads = spec.hyper.get("heads", 1)
    x, q, k, v, attn, o, scale = (cache[n] for n in ("x", "q", "k", "v", "attn", "o", "scale"))
    g2 = g.reshape(-1, g.shape[-1])
    grads = {"wo": g2.T @ o.reshape(-1, o.shape[-1]), "bo": g2.sum(axis=0)}
    do = split_heads(g @ p["wo"], heads)
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = ds @ k * scale
    dk = ds.transpose(0, 1, 3, 2) @ q * scale
    x2 = x.reshape(-1, x.shape[-1])
    gx = np.zeros_like(x)
    for name, dt in (("q", dq), ("k", dk), ("v", dv)):
        dm = merge_heads(dt)
        gx += dm @ p["w" + name]
        dm2 = dm.reshape(-1, dm.shape[-1])
        grads["w" + name] = dm2.T @ x2
        grads["b" + name] = dm2.sum(axis=0)
    return gx, grads, {"attn_grad": dattn}


def _identity_fwd(spec, x, skip):
    return x, {}


def _identity_bwd(spec, cache, g):
    return g, {}, {}


def _residual_end_fwd(spec, x, skip):
    if skip is None or skip.shape != x.shape:
        raise LayerShapeError(f"residual-end branch {x.shape} does not match skip {None if skip is None else skip.shape}")
    return x + skip, {}


def _flatten_fwd(spec, x, skip):
    return x.reshape(x.shape[0], -1), {"x_shape": x.shape}


def _flatten_bwd(spec, cache, g):
    return g.reshape(cache["x_shape"]), {}, {}


def _class_token_fwd(spec, x, skip):
    cls, pos = spec.params["cls"], spec.params["pos"]
    if x.ndim != 3 or x.shape[1] + 1 != pos.shape[0] or x.shape[2] != cls.shape[0]:
        raise LayerShapeError(f"class-token expects (B, {pos.shape[0] - 1}, {cls.shape[0]}), got {x.shape}")
    tok = np.broadcast_to(cls, (x.shape[0], 1, cls.shape[0]))
    return np.concatenate([tok, x], axis=1) + pos, {}


def _class_token_bwd(spec, cache, g):
    return g[:, 1:], {"cls": g[:, 0].sum(axis=0), "pos": g.sum(axis=0)}, {}


def _mean_pool_fwd(spec, x, skip):
    mode = spec.hyper.get("mode", "spatial")
    if mode == "cls":
        return x[:, 0], {"x_shape": x.shape}
    if mode == "tokens":
        return x.mean(axis=1), {"x_shape": x.shape}
    if x.ndim < 3:
        raise LayerShapeError(f"spatial mean-pool needs (B, C, ...), got {x.shape}")
    return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2), {"x_shape": x.shape}


def mean_pool_transpose(spec, g, x_shape):
    mode = spec.hyper.get("mode", "spatial")
    if mode == "cls":
        out = np.zeros(x_shape)
        out[:, 0] = g
        return out
    if mode == "tokens":
        return np.broadcast_to(g[:, None, :] / x_shape[1], x_shape).copy()
    n = int(np.prod(x_shape[2:]))
    return np.broadcast_to(g.reshape(g.shape + (1,) * (len(x_shape) - 2)) / n, x_shape).copy()


def _mean_pool_bwd(spec, cache, g):
    return mean_pool_transpose(spec, g, cache["x_shape"]), {}, {}


KERNELS = {
    "linear": (_linear_fwd, _linear_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "patch-embed": (_patch_fwd, _patch_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "gelu": (_gelu_fwd, _gelu_bwd),
    "maxpool2d": (_maxpool_fwd, _maxpool_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "batchnorm": (_batchnorm_fwd, _batchnorm_bwd),
    "layernorm": (_layernorm_fwd, _layernorm_bwd),
    "self-attention": (_attention_fwd, _attention_bwd),
    "residual-begin": (_identity_fwd, _identity_bwd),
    "residual-end": (_residual_end_fwd, _identity_bwd),
    "flatten": (_flatten_fwd, _flatten_bwd),
    "class-token": (_class_token_fwd, _class_token_bwd),
    "mean-pool": (_mean_pool_fwd, _mean_pool_bwd),
}
