"""Reference attribution metrics that GAE is compared against."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attribution import MethodConfig, attribute_batch
from .gae import QUADRANTS, quadrant_masks, tile_mosaic
from .model import Model, forward_batch

MORF, LERF = "morf", "lerf"


@dataclass
class PerturbationCurve:
    values: np.ndarray  # f(x^0), f(x^1), ..., f(x^L)
    region: int
    ordering: str
    regions: list[tuple[int, int]]


def _spatial(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        return a.sum(axis=0)
    if a.ndim == 2:
        return a
    return a.reshape(1, -1)


def default_region_count(input_shape, region: int, fraction: float = 0.157) -> int:
    """Number of regions covering about the same image fraction as 100 9x9 regions on 224x224."""
    h, w = input_shape[-2:] if len(input_shape) >= 2 else (1, input_shape[0])
    return max(1, int(round(fraction * h * w / (region * region))))


def rank_regions(attribution: np.ndarray, region: int, count: int, ordering: str = MORF) -> list[tuple[int, int]]:
    """Greedy non-overlapping ``region`` x ``region`` windows by summed attribution.

    Windows at every offset are ranked (descending for MoRF, ascending for
    LeRF, ties to the lowest index) and accepted unless they overlap one
    already chosen.
    """
    s = _spatial(attribution)
    h, w = s.shape
    r = min(region, h, w)
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = s.cumsum(0).cumsum(1)
    sums = ii[r:, r:] - ii[:-r, r:] - ii[r:, :-r] + ii[:-r, :-r]
    flat = sums.ravel()
    order = np.argsort(-flat if ordering == MORF else flat, kind="stable")
    taken = np.zeros((h, w), dtype=bool)
    chosen: list[tuple[int, int]] = []
    nw = sums.shape[1]
    for idx in order:
        if len(chosen) == count:
            break
        i, j = divmod(int(idx), nw)
        if taken[i : i + r, j : j + r].any():
            continue
        taken[i : i + r, j : j + r] = True
        chosen.append((i, j))
    if len(chosen) < count:
        raise ValueError(f"only {len(chosen)} non-overlapping {r}x{r} regions fit, {count} requested")
    return chosen


def perturbation_curve(
    model: Model,
    x: np.ndarray,
    attribution: np.ndarray,
    target: int,
    L: int,
    region: int = 9,
    ordering: str = MORF,
    rng: np.random.Generator | None = None,
    fill: str = "uniform",
    noise: np.ndarray | None = None,
) -> PerturbationCurve:
    x = np.asarray(x, dtype=np.float64)
    if L == 0:
        v0 = forward_batch(model, x[None]).output()[0, target]
        return PerturbationCurve(np.array([v0]), region, ordering, [])
    if noise is None:
        if fill == "uniform":
            rng = rng if rng is not None else np.random.default_rng()
            noise = rng.uniform(0.0, 1.0, size=x.shape)
        elif fill == "zero":
            noise = np.zeros_like(x)
        else:
            raise ValueError(f"unknown fill {fill!r}")
    regions = rank_regions(attribution, region, L, ordering)
    r = min(region, *_spatial(x).shape)
    batch = [x]
    cur = x.copy()
    view = cur.reshape((-1,) + _spatial(x).shape)
    nview = noise.reshape(view.shape)
    for i, j in regions:
        view[:, i : i + r, j : j + r] = nview[:, i : i + r, j : j + r]
        batch.append(cur.copy())
    out = forward_batch(model, np.stack(batch)).output()[:, target]
    return PerturbationCurve(out, region, ordering, regions)


def aopc(model, x, attribution, L, region=9, rng=None, target=None, fill="uniform", ordering=MORF) -> float:
    """Per-example area over the perturbation curve: sum_k (f(x^0) - f(x^k)) / (L + 1)."""
    if target is None:
        target = int(np.argmax(forward_batch(model, np.asarray(x, dtype=np.float64)[None]).output()[0]))
    curve = perturbation_curve(model, x, attribution, target, L, region, ordering, rng, fill)
    v = curve.values
    return float((v[0] - v[1:]).sum() / (L + 1))


def abpc(model, x, attribution, L, region=9, rng=None, target=None, fill="uniform") -> float:
    """Per-example area between the LeRF and MoRF curves; both share one noise draw."""
    x = np.asarray(x, dtype=np.float64)
    if target is None:
        target = int(np.argmax(forward_batch(model, x[None]).output()[0]))
    if fill == "uniform":
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.uniform(0.0, 1.0, size=x.shape)
    else:
        noise = np.zeros_like(x)
    mo = perturbation_curve(model, x, attribution, target, L, region, MORF, noise=noise)
    le = perturbation_curve(model, x, attribution, target, L, region, LERF, noise=noise)
    return float((le.values[1:] - mo.values[1:]).sum() / (L + 1))


def _sample_ball(rng, x, epsilon):
    d = rng.normal(size=x.shape)
    norm = np.linalg.norm(d)
    if norm == 0:
        return x.copy()
    radius = epsilon * rng.uniform() ** (1.0 / x.size)
    return x + d / norm * radius


def lipschitz_estimate(
    method: MethodConfig | Callable[[np.ndarray], np.ndarray],
    model: Model | None,
    x: np.ndarray,
    epsilon: float = 0.1,
    n_samples: int = 10,
    rng: np.random.Generator | None = None,
    target: int | None = None,
    of: str = "attribution",
) -> float:
    """Monte Carlo maximum of |g(x) - g(x')| / |x - x'| over the epsilon ball.

    ``g`` is the explanation (``of="attribution"``) or the model logits
    (``of="output"``).
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    x = np.asarray(x, dtype=np.float64)
    if of == "output":
        g = lambda v: forward_batch(model, v[None]).output()[0]
    elif callable(method) and not isinstance(method, MethodConfig):
        g = method
    else:
        if target is None:
            target = int(np.argmax(forward_batch(model, x[None]).output()[0]))
        g = lambda v: attribute_batch(model, v[None], target, method)[0]
    base = np.asarray(g(x), dtype=np.float64)
    best = 0.0
    for _ in range(n_samples):
        xp = _sample_ball(rng, x, epsilon)
        dist = np.linalg.norm((x - xp).ravel())
        if dist == 0:
            continue
        best = max(best, float(np.linalg.norm((base - np.asarray(g(xp))).ravel()) / dist))
    return best


# ---------------------------------------------------------------- Focus


@dataclass
class FocusMosaic:
    image: np.ndarray
    positive_quadrants: tuple[int, int]
    target: int


def build_focus_mosaic(positives: Sequence[np.ndarray], negatives: Sequence[np.ndarray], target: int, rng) -> FocusMosaic:
    """Two images of ``target`` and two of other classes in a random arrangement."""
    if len(positives) != 2 or len(negatives) != 2:
        raise ValueError("Focus mosaics take two positives and two negatives")
    images = list(positives) + list(negatives)
    order = [int(i) for i in rng.permutation(4)]  # order[q] = image index in quadrant q
    pos_q = tuple(sorted(q for q in range(4) if order[q] < 2))
    return FocusMosaic(tile_mosaic(images, order), pos_q, target)


def focus_score(attribution: np.ndarray, positive_quadrants: Sequence[int]) -> float | None:
    """Share of positive relevance inside the positive quadrants; None when there is none."""
    a = np.maximum(np.asarray(attribution, dtype=np.float64), 0.0)
    shape = a.shape if a.ndim == 3 else (1,) + a.shape
    qm = quadrant_masks(shape)
    spatial = a.reshape(shape).sum(axis=0)
    total = spatial.sum()
    if total == 0:
        return None
    return float(sum(spatial[qm[q]].sum() for q in positive_quadrants) / total)


def focus(model: Model, mosaic: FocusMosaic, method: MethodConfig, target: int | None = None) -> float | None:
    target = mosaic.target if target is None else target
    a = attribute_batch(model, mosaic.image[None], target, method)[0]
    return focus_score(a, mosaic.positive_quadrants)


def sample_focus_mosaic(images: np.ndarray, labels: np.ndarray, seed: int, group_id: int) -> FocusMosaic | None:
    rng = np.random.default_rng([seed, group_id, 7])
    classes = [c for c in np.unique(labels) if (labels == c).sum() >= 2 and (labels != c).sum() >= 2]
    if not classes:
        return None
    c = int(rng.choice(classes))
    pos = rng.choice(np.flatnonzero(labels == c), size=2, replace=False)
    neg = rng.choice(np.flatnonzero(labels != c), size=2, replace=False)
    return build_focus_mosaic([images[i] for i in pos], [images[i] for i in neg], c, rng)


__all__ = [
    "PerturbationCurve",
    "perturbation_curve",
    "rank_regions",
    "aopc",
    "abpc",
    "lipschitz_estimate",
    "FocusMosaic",
    "build_focus_mosaic",
    "focus",
    "focus_score",
    "sample_focus_mosaic",
    "default_region_count",
    "QUADRANTS",
]
