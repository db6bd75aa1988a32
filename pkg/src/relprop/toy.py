"""Two-input toy networks contrasting absLRP with LRP-alpha1beta0."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attribution import lrp_backward
from .model import forward_batch, toy_network
from .rules import EPS, AbsLRP, AlphaBetaRule, Rule

TOY_INPUT = np.array([1.0, 1.0])

# (name, second hidden neuron weights, expected absLRP, expected alpha1beta0)
CASES = (
    ("balanced", (-1.0, 2.0), (0.5, 0.5), (0.5, 0.5)),
    ("unbalanced", (-5.0, 6.0), (0.25, 0.75), (0.5, 0.5)),
    ("ratio-9-to-1", (-17.0, 18.0), (0.1, 0.9), (0.5, 0.5)),
)


def toy_attribution(second_hidden, rule: Rule) -> np.ndarray:
    """Input relevance scaled to unit absolute sum."""
    model = toy_network(second_hidden)
    tape = forward_batch(model, TOY_INPUT[None])
    rel = lrp_backward(tape, np.ones((1, 1)), rule)[0]
    total = np.abs(rel).sum()
    return rel / total if total > 0 else rel


@dataclass
class ToyCheck:
    rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r["ok"] for r in self.rows)


def toycheck(
    abslrp_rule: Callable[[float], Rule] = AbsLRP,
    epsilon: float = EPS,
    tol: float = 1e-6,
) -> ToyCheck:
    """Compare both rules on the three toy networks against their known attributions.

    ``abslrp_rule`` is swappable so a deliberately broken rule can be shown
    to fail the check.
    """
    start = time.perf_counter()
    out = ToyCheck()
    for name, hidden, want_abs, want_ab in CASES:
        for rule_name, rule, want in (
            ("abslrp", abslrp_rule(epsilon), want_abs),
            ("lrp-a1b0", AlphaBetaRule(1.0, 0.0), want_ab),
        ):
            got = toy_attribution(hidden, rule)
            err = float(np.max(np.abs(got - np.asarray(want))))
            out.rows.append(
                {"case": name, "rule": rule_name, "got": got.tolist(), "want": list(want), "max_err": err, "ok": err <= tol}
            )
    out.seconds = time.perf_counter() - start
    return out
