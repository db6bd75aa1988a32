"""Wilcoxon signed-rank test for paired samples."""

from __future__ import annotations

import math

import numpy as np

EXACT_MAX_N = 25


def signed_ranks(diffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of |d| (zeros already removed) and the sign of each difference."""
    a = np.abs(diffs)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks, np.sign(diffs)


def _exact_p(ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided p from the exact null distribution of W+ over all 2^n sign flips.

    Ranks are averages of integers, so doubling makes them integral and the
    distribution is a subset-sum count.
    """
    r2 = np.rint(ranks * 2).astype(int)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    probs = counts / counts.sum()
    w2 = int(round(w_plus * 2))
    lower = probs[: w2 + 1].sum()
    upper = probs[w2:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def _normal_p(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    if var <= 0:
        return 1.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def wilcoxon_signed_rank(a, b, exact: bool | None = None) -> float:
    """Two-sided p-value for paired samples ``a`` and ``b``.

    Zero differences are discarded and tied magnitudes get average ranks.
    Exact enumeration is used up to 25 non-zero pairs, otherwise the normal
    approximation with tie and continuity corrections.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    ranks, signs = signed_ranks(d)
    w_plus = float(ranks[signs > 0].sum())
    if exact is None:
        exact = d.size <= EXACT_MAX_N
    return _exact_p(ranks, w_plus) if exact else _normal_p(ranks, w_plus)
