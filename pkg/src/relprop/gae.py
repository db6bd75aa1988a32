"""Global attribution evaluation: local consistency times contrastiveness.

Local consistency masks the input step by step, most- or least-impactful
first, where impact is ``|x * d|f_target|/dx|``.  It compares how the model
output and the attribution map move under the two orderings (robustness),
and how the initial map agrees with the sign of the combined impact map
(faithfulness).  Contrastiveness places the image in a 2x2 mosaic with
three others and checks where the attribution mass lands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attribution import MethodConfig, attribute_batch
from .layers import softmax
from .model import Model, backward, forward_batch

MORF, LERF = "morf", "lerf"


class NonPositiveOutput(ValueError):
    """The target logit of the unmasked input is not positive; normalization is undefined."""


def normalize_attribution(a: np.ndarray, batched: bool = False) -> np.ndarray:
    """Positive part scaled so the largest value is 1; all-zero maps stay zero."""
    pos = np.maximum(np.asarray(a, dtype=np.float64), 0.0)
    if not batched:
        m = pos.max(initial=0.0)
        return pos / m if m > 0 else pos
    flat = pos.reshape(pos.shape[0], -1)
    m = flat.max(axis=1)
    m = np.where(m > 0, m, 1.0)
    return (flat / m[:, None]).reshape(pos.shape)


# ---------------------------------------------------------------- masking


def _impact_and_logits(model: Model, xs: np.ndarray, target: int):
    tape = forward_batch(model, xs)
    logits = tape.output()
    seed = np.zeros_like(logits)
    seed[:, target] = np.sign(logits[:, target])  # d|f|/df
    g = backward(tape, seed)
    return np.abs(xs * g), logits


def impact_map(model: Model, x: np.ndarray, target: int) -> np.ndarray:
    """|x * d|logit_target|/dx|, elementwise."""
    if not 0 <= target < model.n_classes:
        raise ValueError(f"target {target} out of range")
    return _impact_and_logits(model, np.asarray(x, dtype=np.float64)[None], target)[0][0]


def _pixel_scores(a: np.ndarray) -> np.ndarray:
    """Channel-summed scores for (C, H, W) inputs; flat scores otherwise."""
    return a.sum(axis=0).ravel() if a.ndim == 3 else a.ravel()


def _apply_mask(x: np.ndarray, masked: np.ndarray) -> np.ndarray:
    out = x.copy()
    if x.ndim == 3:
        out[:, masked.reshape(x.shape[1:])] = 0.0
    else:
        out.reshape(-1)[masked] = 0.0
    return out


def mask_schedule(n_pixels: int, steps: int, k: float) -> list[int]:
    """Number of newly masked pixels at each step; cumulative counts round(t*k*P)."""
    if steps < 1:
        raise ValueError("T must be at least 1")
    if not 0 < k * steps <= 1 + 1e-12:
        raise ValueError("need 0 < k*T <= 100%")
    cum = [min(n_pixels, int(math.floor(t * k * n_pixels + 0.5))) for t in range(steps + 1)]
    return [b - a for a, b in zip(cum[:-1], cum[1:])]


@dataclass
class MaskingTrace:
    mode: str
    o_init: float
    outputs: np.ndarray  # (T,) target logit / o_init after each step
    inputs: np.ndarray  # (T, *input) masked inputs after each step
    impacts: np.ndarray  # (T, *input) impact maps used to pick each step's pixels
    masks: np.ndarray  # (T, P) cumulative masks
    attributions: np.ndarray | None = None  # (T, *input) normalized maps


def run_masking(
    model: Model,
    x: np.ndarray,
    target: int,
    mode: str = MORF,
    T: int = 10,
    k: float = 0.02,
    method: MethodConfig | None = None,
) -> MaskingTrace:
    """Gradient-guided zero masking, re-ranking impact after every step."""
    if mode not in (MORF, LERF):
        raise ValueError(f"mode must be {MORF!r} or {LERF!r}")
    x = np.asarray(x, dtype=np.float64)
    n_pix = _pixel_scores(x).size
    schedule = mask_schedule(n_pix, T, k)
    masked = np.zeros(n_pix, dtype=bool)
    cur = x
    impacts, inputs, masks, outputs = [], [], [], []
    imp, logits = _impact_and_logits(model, cur[None], target)
    o_init = float(logits[0, target])
    if not o_init > 0:
        raise NonPositiveOutput(f"initial target output {o_init:.4g} is not positive")
    for count in schedule:
        score = _pixel_scores(imp[0])
        free = np.flatnonzero(~masked)
        key = score[free] if mode == LERF else -score[free]
        chosen = free[np.argsort(key, kind="stable")[:count]]
        masked[chosen] = True
        cur = _apply_mask(x, masked)
        impacts.append(imp[0])
        inputs.append(cur)
        masks.append(masked.copy())
        imp, logits = _impact_and_logits(model, cur[None], target)
        outputs.append(logits[0, target] / o_init)
    trace = MaskingTrace(mode, o_init, np.array(outputs), np.stack(inputs), np.stack(impacts), np.stack(masks))
    if method is not None:
        trace.attributions = normalize_attribution(attribute_batch(model, trace.inputs, target, method), batched=True)
    return trace


# ---------------------------------------------------------------- local consistency


def attribution_similarity(a_init: np.ndarray, a_t: np.ndarray) -> float:
    """1 - |a - b|_1 / (|a|_1 + |b|_1); two all-zero maps count as identical."""
    a_init, a_t = np.asarray(a_init, dtype=np.float64), np.asarray(a_t, dtype=np.float64)
    if a_init.shape != a_t.shape:
        raise ValueError("attribution maps differ in shape")
    den = np.abs(a_init).sum() + np.abs(a_t).sum()
    if den == 0:
        return 1.0
    return float(1.0 - np.abs(a_init - a_t).sum() / den)


def local_consistency_robustness(d_o, d_a) -> float:
    """Agreement of the output and similarity difference curves, in [-1, 1]."""
    d_o, d_a = np.asarray(d_o, dtype=np.float64), np.asarray(d_a, dtype=np.float64)
    if d_o.shape != d_a.shape:
        raise ValueError("difference curves must have equal length")
    den = np.abs(d_o).sum() + np.abs(d_a).sum()
    if den == 0:
        return 1.0
    # clip rounding spill past the bounds
    return float(np.clip(1.0 - 2.0 * np.abs(d_o - d_a).sum() / den, -1.0, 1.0))


def similarity_curve(a_init: np.ndarray, maps: np.ndarray) -> np.ndarray:
    return np.array([attribution_similarity(a_init, m) for m in maps])


def difference_curves(trace_mo: MaskingTrace, trace_le: MaskingTrace, a_init: np.ndarray):
    """(d_o, d_A): LeRF minus MoRF for normalized outputs and for map similarity."""
    if trace_mo.attributions is None or trace_le.attributions is None:
        raise ValueError("traces carry no attribution maps")
    d_o = trace_le.outputs - trace_mo.outputs
    d_a = similarity_curve(a_init, trace_le.attributions) - similarity_curve(a_init, trace_mo.attributions)
    return d_o, d_a


def combined_impact_map(trace_mo: MaskingTrace, trace_le: MaskingTrace) -> np.ndarray:
    """Cumulative LeRF impact minus cumulative MoRF impact."""
    return trace_le.impacts.sum(axis=0) - trace_mo.impacts.sum(axis=0)


def local_consistency_faithfulness(a_init: np.ndarray, i_c: np.ndarray) -> float:
    a_init = np.asarray(a_init, dtype=np.float64)
    norm = np.abs(a_init).sum()
    if norm == 0:
        return 0.0
    return float(np.clip((a_init * np.sign(i_c)).sum() / norm, -1.0, 1.0))


def local_consistency(lc_r: float, lc_f: float) -> float:
    return min(1.0, max(0.0, (lc_r + lc_f) / 2.0))


# ---------------------------------------------------------------- contrastiveness


QUADRANTS = ((0, 0), (0, 1), (1, 0), (1, 1))  # top-left, top-right, bottom-left, bottom-right


def tile_mosaic(images: Sequence[np.ndarray], order: Sequence[int]) -> np.ndarray:
    """Place ``images[order[q]]`` in quadrant q of a 2x2 grid and shrink back to one image size.

    Each image is 2x2 average-pooled so the mosaic has the model's input shape.
    """
    c, h, w = images[0].shape
    if h % 2 or w % 2:
        raise ValueError("mosaics need even image height and width")
    full = np.zeros((c, 2 * h, 2 * w))
    for q, idx in enumerate(order):
        r, s = QUADRANTS[q]
        full[:, r * h : (r + 1) * h, s * w : (s + 1) * w] = images[idx]
    return full.reshape(c, h, 2, w, 2).mean(axis=(2, 4))


def quadrant_masks(shape) -> np.ndarray:
    """(4, H, W) boolean masks of the quadrants of an (C, H, W) image."""
    _, h, w = shape
    out = np.zeros((4, h, w), dtype=bool)
    for q, (r, s) in enumerate(QUADRANTS):
        out[q, r * h // 2 : (r + 1) * h // 2, s * w // 2 : (s + 1) * w // 2] = True
    return out


@dataclass
class Mosaic:
    image: np.ndarray
    positive_quadrant: int
    positive_class: int
    negative_classes: list[int]
    positive_scores: np.ndarray  # softmax of the model on the positive image
    scoring_map: np.ndarray
    quadrant_values: np.ndarray = field(default_factory=lambda: np.zeros(4))


class RejectedExample(ValueError):
    pass


def negative_quadrant_value(scores: np.ndarray, c_p: int, c_n: int) -> float:
    if scores[c_p] == 0:
        raise RejectedExample("positive class has zero softmax score")
    return float(2.0 * scores[c_n] / scores[c_p] - 1.0)


def build_mosaic(positive: np.ndarray, negatives: Sequence[np.ndarray], model: Model, rng=None, quadrant: int | None = None) -> Mosaic:
    """One positive and three negatives; classes are the model's predictions."""
    if len(negatives) != 3:
        raise ValueError("a contrastiveness mosaic needs exactly three negatives")
    images = [np.asarray(positive, dtype=np.float64)] + [np.asarray(n, dtype=np.float64) for n in negatives]
    if any(im.shape != images[0].shape for im in images):
        raise ValueError("mosaic images must share one shape")
    if quadrant is None:
        rng = rng if rng is not None else np.random.default_rng()
        quadrant = int(rng.integers(4))
    logits = forward_batch(model, np.stack(images)).output()
    scores = softmax(logits[0])
    c_p = int(np.argmax(logits[0]))
    c_n = [int(np.argmax(l)) for l in logits[1:]]
    values = np.empty(4)
    order = [0] * 4
    neg_slots = [q for q in range(4) if q != quadrant]
    values[quadrant] = 1.0
    for i, q in enumerate(neg_slots):
        order[q] = i + 1
        values[q] = negative_quadrant_value(scores, c_p, c_n[i])
    image = tile_mosaic(images, order)
    qm = quadrant_masks(image.shape)
    smap = np.broadcast_to((values[:, None, None] * qm).sum(axis=0), image.shape).copy()
    return Mosaic(image, quadrant, c_p, c_n, scores, smap, values)


def contrastiveness(a_mosaic: np.ndarray, mosaic: Mosaic | np.ndarray) -> float:
    smap = mosaic.scoring_map if isinstance(mosaic, Mosaic) else np.asarray(mosaic)
    a = np.asarray(a_mosaic, dtype=np.float64)
    norm = np.abs(a).sum()
    if norm == 0:
        return 0.0
    return float(np.clip((a * smap).sum() / norm, 0.0, 1.0))


def gae_score(lc: float, c: float) -> float:
    return lc * c


# ---------------------------------------------------------------- harness


@dataclass
class GaeReport:
    group_id: int
    method: str
    lc_r: float
    lc_f: float
    lc: float
    c: float
    total: float
    o_morf: np.ndarray | None = None
    o_lerf: np.ndarray | None = None
    sim_morf: np.ndarray | None = None
    sim_lerf: np.ndarray | None = None

    def record(self, curves: bool = False) -> dict:
        out = {
            "metric": "gae",
            "group_id": self.group_id,
            "method": self.method,
            "lc_r": self.lc_r,
            "lc_f": self.lc_f,
            "lc": self.lc,
            "c": self.c,
            "total": self.total,
        }
        if curves and self.o_morf is not None:
            out["curves"] = {
                "o_morf": self.o_morf.tolist(),
                "o_lerf": self.o_lerf.tolist(),
                "sim_morf": self.sim_morf.tolist(),
                "sim_lerf": self.sim_lerf.tolist(),
            }
        return out


@dataclass
class GroupSample:
    group_id: int
    indices: list[int]
    positive: int
    quadrant: int


def sample_group(n_examples: int, seed: int, group_id: int) -> GroupSample:
    if n_examples < 4:
        raise ValueError("GAE needs at least four examples")
    rng = np.random.default_rng([seed, group_id])
    idx = [int(i) for i in rng.choice(n_examples, size=4, replace=False)]
    slot = int(rng.integers(4))
    quadrant = int(rng.integers(4))
    return GroupSample(group_id, idx, slot, quadrant)


def evaluate_group(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray | None,
    sample: GroupSample,
    methods: Sequence[MethodConfig],
    T: int = 10,
    k: float = 0.02,
    skip_misclassified: bool = False,
) -> list[GaeReport] | str:
    """Score every method on one sampled group; returns a skip reason instead when skipped."""
    pos_idx = sample.indices[sample.positive]
    x = images[pos_idx]
    logits = forward_batch(model, x[None]).output()[0]
    target = int(np.argmax(logits))
    if skip_misclassified and labels is not None and target != int(labels[pos_idx]):
        return "misclassified"
    try:
        mo = run_masking(model, x, target, MORF, T, k)
        le = run_masking(model, x, target, LERF, T, k)
    except NonPositiveOutput:
        return "non-positive-output"
    negatives = [images[i] for j, i in enumerate(sample.indices) if j != sample.positive]
    try:
        mosaic = build_mosaic(x, negatives, model, quadrant=sample.quadrant)
    except RejectedExample:
        return "rejected-mosaic"
    i_c = combined_impact_map(mo, le)
    batch = np.concatenate([x[None], mo.inputs, le.inputs, mosaic.image[None]])
    reports = []
    for cfg in methods:
        maps = normalize_attribution(attribute_batch(model, batch, target, cfg), batched=True)
        a_init, a_mo, a_le, a_mos = maps[0], maps[1 : T + 1], maps[T + 1 : 2 * T + 1], maps[-1]
        sim_mo, sim_le = similarity_curve(a_init, a_mo), similarity_curve(a_init, a_le)
        lc_r = local_consistency_robustness(le.outputs - mo.outputs, sim_le - sim_mo)
        lc_f = local_consistency_faithfulness(a_init, i_c)
        lc = local_consistency(lc_r, lc_f)
        c = contrastiveness(a_mos, mosaic)
        reports.append(
            GaeReport(sample.group_id, cfg.label, lc_r, lc_f, lc, c, gae_score(lc, c), mo.outputs, le.outputs, sim_mo, sim_le)
        )
    return reports


def evaluate_gae(
    model: Model,
    dataset,
    method_config: MethodConfig | Sequence[MethodConfig],
    T: int = 10,
    k: float = 0.02,
    seed: int = 0,
    n_groups: int = 100,
    skip_misclassified: bool = False,
    progress: Callable[[int], None] | None = None,
):
    """Yield per-group reports (lists, one entry per method) or skip reasons, in group order."""
    methods = [method_config] if isinstance(method_config, MethodConfig) else list(method_config)
    images, labels = as_arrays(dataset)
    for g in range(n_groups):
        sample = sample_group(len(images), seed, g)
        yield g, evaluate_group(model, images, labels, sample, methods, T, k, skip_misclassified)
        if progress:
            progress(g)


def as_arrays(dataset):
    """Accept (images, labels) arrays or an iterable of (image, label[, ...]) items."""
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        return np.asarray(dataset[0], dtype=np.float64), np.asarray(dataset[1])
    items = list(dataset)
    return np.stack([np.asarray(it[0], dtype=np.float64) for it in items]), np.array([it[1] for it in items])


def summarize(reports: Sequence[GaeReport]) -> dict:
    """Means and medians per component, plus both readings of the aggregate total."""
    out: dict = {"n": len(reports)}
    if not reports:
        return out
    for name in ("lc_r", "lc_f", "lc", "c", "total"):
        vals = np.array([getattr(r, name) for r in reports])
        out[f"mean_{name}"] = float(vals.mean())
        out[f"median_{name}"] = float(np.median(vals))
    out["product_of_means"] = out["mean_lc"] * out["mean_c"]
    return out
