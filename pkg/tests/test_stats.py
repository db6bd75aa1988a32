import itertools

import numpy as np
import pytest

from relprop.stats import signed_ranks, wilcoxon_signed_rank


def enumerate_p(a, b):
    """Two-sided p by listing all 2^n sign assignments of the ranked differences."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    ranks, signs = signed_ranks(d)
    w = ranks[signs > 0].sum()
    stats = np.array([sum(r for r, s in zip(ranks, flips) if s) for flips in itertools.product([0, 1], repeat=len(d))])
    lo = np.mean(stats <= w + 1e-9)
    hi = np.mean(stats >= w - 1e-9)
    return min(1.0, 2 * min(lo, hi))


def test_examples():
    a = np.arange(10.0)
    assert wilcoxon_signed_rank(a, a) == 1.0
    assert wilcoxon_signed_rank(np.arange(1.0, 7.0), np.zeros(6)) == pytest.approx(0.03125)
    b = np.random.default_rng(0).normal(size=30)
    assert wilcoxon_signed_rank(b + 1, b) < 0.001


def test_average_ranks():
    ranks, signs = signed_ranks(np.array([1.0, -1.0, 3.0, 2.0]))
    np.testing.assert_array_equal(ranks, [1.5, 1.5, 4.0, 3.0])
    np.testing.assert_array_equal(signs, [1, -1, 1, 1])


def test_matches_enumeration_on_fuzzed_samples():
    rng = np.random.default_rng(42)
    for _ in range(500):
        n = int(rng.integers(1, 13))
        a = rng.integers(-3, 4, size=n).astype(float)  # small integers force ties and zeros
        b = rng.integers(-3, 4, size=n).astype(float)
        assert wilcoxon_signed_rank(a, b) == pytest.approx(enumerate_p(a, b), abs=1e-12)


def test_normal_approximation_near_exact():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=25), rng.normal(size=25) + 0.3
    assert abs(wilcoxon_signed_rank(a, b, exact=False) - wilcoxon_signed_rank(a, b, exact=True)) < 0.02


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [1, 2, 3])
