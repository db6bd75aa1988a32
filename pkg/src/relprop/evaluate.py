"""Group-wise evaluation runs shared by the CLI and the acceptance suite.

Every group draws its examples from ``default_rng([seed, group_id])`` so a
run is reproducible regardless of how groups are scheduled across workers.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

import numpy as np

from . import gae
from .attribution import MethodConfig, attribute_batch
from .metrics import (
    abpc,
    aopc,
    default_region_count,
    focus,
    lipschitz_estimate,
    sample_focus_mosaic,
)
from .model import Model, forward_batch
from .stats import wilcoxon_signed_rank

METRICS = ("gae", "aopc", "abpc", "lipschitz", "focus")


def default_region(input_shape) -> int:
    """Region side scaled from 9 pixels at 224 to the input's smaller side."""
    return max(1, int(round(9 * min(input_shape[-2:]) / 224)))


def _example_index(n: int, seed: int, group_id: int, metric: str) -> int:
    rng = np.random.default_rng([seed, group_id, METRICS.index(metric) + 1])
    return int(rng.integers(n))


def evaluate_one_group(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray | None,
    methods: Sequence[MethodConfig],
    metrics: Sequence[str],
    group_id: int,
    seed: int = 0,
    T: int = 10,
    k: float = 0.02,
    L: int | None = None,
    region: int | None = None,
    epsilon: float = 0.1,
    samples: int = 10,
    skip_misclassified: bool = False,
    curves: bool = False,
) -> list[dict]:
    """Per-group records for every requested metric and method.

    With ``curves`` the GAE records carry their masking curves under a
    ``"curves"`` key (used for figures, stripped from the report).
    """
    records: list[dict] = []
    shape = images.shape[1:]
    region = region or default_region(shape)
    L = default_region_count(shape, region) if L is None else L
    for metric in metrics:
        base = {"metric": metric, "group_id": group_id}
        if metric == "gae":
            sample = gae.sample_group(len(images), seed, group_id)
            out = gae.evaluate_group(model, images, labels, sample, methods, T, k, skip_misclassified)
            if isinstance(out, str):
                records += [{**base, "method": m.label, "skipped": out} for m in methods]
            else:
                records += [r.record(curves) for r in out]
            continue
        if metric == "focus":
            mosaic = sample_focus_mosaic(images, labels, seed, group_id) if labels is not None else None
            for m in methods:
                v = focus(model, mosaic, m) if mosaic is not None else None
                records.append({**base, "method": m.label, "value": v} if v is not None else {**base, "method": m.label, "skipped": "no-positive-relevance" if mosaic else "no-labels"})
            continue
        idx = _example_index(len(images), seed, group_id, metric)
        x = images[idx]
        target = int(np.argmax(forward_batch(model, x[None]).output()[0]))
        for j, m in enumerate(methods):
            rng = np.random.default_rng([seed, group_id, 100 + METRICS.index(metric)])
            if metric == "lipschitz":
                v = lipschitz_estimate(m, model, x, epsilon, samples, rng, target)
            else:
                a = attribute_batch(model, x[None], target, m)[0]
                fn = aopc if metric == "aopc" else abpc
                v = fn(model, x, a, L, region, rng, target)
            records.append({**base, "method": m.label, "value": v, "example": idx})
    return records


_WORKER: dict = {}


def _init_worker(args):
    _WORKER["args"] = args


def _run_group(group_id):
    model, images, labels, methods, metrics, kw = _WORKER["args"]
    return evaluate_one_group(model, images, labels, methods, metrics, group_id, **kw)


def run_evaluation(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray | None,
    methods: Sequence[MethodConfig],
    metrics: Sequence[str] = ("gae",),
    groups: int = 100,
    jobs: int = 1,
    **kw,
) -> list[dict]:
    """Per-group records in canonical (group, metric, method) order."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metric(s) {sorted(unknown)}")
    if len(images) < 4:
        raise ValueError(f"evaluation needs at least four images, got {len(images)}")
    methods = list(methods)
    metrics = list(metrics)
    if jobs <= 1:
        per_group = [evaluate_one_group(model, images, labels, methods, metrics, g, **kw) for g in range(groups)]
    else:
        args = (model, images, labels, methods, metrics, kw)
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(args,)) as pool:
            per_group = list(pool.map(_run_group, range(groups), chunksize=max(1, groups // (4 * jobs))))
    return list(itertools.chain.from_iterable(per_group))


_VALUE_FIELD = {"gae": "total"}
_GAE_FIELDS = ("lc_r", "lc_f", "lc", "c", "total")


def summarize_records(records: Sequence[dict]) -> list[dict]:
    """Per (metric, method) summaries followed by pairwise Wilcoxon p-values."""
    out = []
    keyed: dict[tuple[str, str], dict[int, dict]] = {}
    skipped: dict[tuple[str, str], int] = {}
    for r in records:
        key = (r["metric"], r["method"])
        keyed.setdefault(key, {})
        skipped.setdefault(key, 0)
        if "skipped" in r:
            skipped[key] += 1
        else:
            keyed[key][r["group_id"]] = r
    for (metric, method), by_group in keyed.items():
        rec = {"metric": metric, "method": method, "kind": "summary", "n": len(by_group), "skipped": skipped[(metric, method)]}
        fields = _GAE_FIELDS if metric == "gae" else ("value",)
        for f in fields:
            vals = np.array([r[f] for r in by_group.values()], dtype=np.float64)
            name = f if metric == "gae" else "value"
            rec[f"mean_{name}"] = float(vals.mean()) if vals.size else None
            rec[f"median_{name}"] = float(np.median(vals)) if vals.size else None
        if metric == "gae" and by_group:
            rec["product_of_means"] = rec["mean_lc"] * rec["mean_c"]
        out.append(rec)
    metrics = list(dict.fromkeys(m for m, _ in keyed))
    for metric in metrics:
        names = [m for (mm, m) in keyed if mm == metric]
        field = _VALUE_FIELD.get(metric, "value")
        for a, b in itertools.combinations(names, 2):
            ga, gb = keyed[(metric, a)], keyed[(metric, b)]
            common = sorted(set(ga) & set(gb))
            rec = {"metric": metric, "kind": "wilcoxon", "a": a, "b": b, "field": field, "n": len(common)}
            if common:
                va = np.array([ga[g][field] for g in common])
                vb = np.array([gb[g][field] for g in common])
                rec["p"] = wilcoxon_signed_rank(va, vb)
                rec["mean_diff"] = float((va - vb).mean())
            else:
                rec["p"] = None
            out.append(rec)
    return out
