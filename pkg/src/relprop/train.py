"""Deterministic minibatch SGD for the fixture classifiers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .layers import softmax
from .model import Model, backward, forward_batch, mlp, small_cnn, tiny_vit

log = logging.getLogger(__name__)

ACCURACY_FLOORS = {"mlp": 0.99, "cnn": 0.90, "tiny-vit": 0.80}


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"training diverged in epoch {epoch} (non-finite value {loss})")


class AccuracyBelowFloor(RuntimeError):
    def __init__(self, accuracy: float, floor: float):
        self.accuracy, self.floor = accuracy, floor
        super().__init__(f"held-out accuracy {accuracy:.3f} is below the floor {floor:.3f}")


@dataclass
class TrainLog:
    losses: list[float]
    accuracy: float


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the logits."""
    p = softmax(logits)
    n = len(labels)
    loss = -np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean()
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def accuracy(model: Model, xs: np.ndarray, ys: np.ndarray, batch: int = 256) -> float:
    hits = 0
    for i in range(0, len(xs), batch):
        hits += int((forward_batch(model, xs[i : i + batch]).output().argmax(axis=1) == ys[i : i + batch]).sum())
    return hits / len(xs)


def build(arch: str, input_shape, n_classes: int, seed: int) -> Model:
    if arch == "mlp":
        return mlp([int(np.prod(input_shape)), 16, n_classes], seed=seed)
    if arch == "cnn":
        return small_cnn(tuple(input_shape), n_classes, seed=seed)
    if arch == "tiny-vit":
        return tiny_vit(tuple(input_shape), n_classes, seed=seed)
    raise ValueError(f"unknown architecture {arch!r}")


def _arrays(data):
    if hasattr(data, "arrays"):
        return data.arrays()
    xs, ys = data
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=int)


def holdout_split(n: int, fraction: float, seed: int):
    perm = np.random.default_rng([seed, 1]).permutation(n)
    k = int(round(fraction * n))
    return perm[k:], perm[:k]


def sgd(
    model: Model,
    xs: np.ndarray,
    ys: np.ndarray,
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 32,
    momentum: float = 0.9,
    clip: float = 5.0,
) -> list[float]:
    """Train ``model`` in place with momentum SGD and a cosine learning-rate decay."""
    rng = np.random.default_rng([seed, 2])
    velocity = {(i, k): np.zeros_like(v) for i, k, v in model.parameters()}
    steps = epochs * math.ceil(len(xs) / batch_size)
    step = 0
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(xs))
        total = 0.0
        for s in range(0, len(xs), batch_size):
            idx = order[s : s + batch_size]
            tape = forward_batch(model, xs[idx])
            loss, g = cross_entropy(tape.output(), ys[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            _, pgrads = backward(tape, g, params=True)
            norm = math.sqrt(sum(float((v**2).sum()) for pg in pgrads for v in pg.values()))
            if not math.isfinite(norm):
                raise TrainingDiverged(epoch, loss if not math.isfinite(loss) else norm)
            scale = min(1.0, clip / norm) if norm > 0 else 1.0
            rate = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
            for i, pg in enumerate(pgrads):
                spec = model.layers[i]
                for k, gk in pg.items():
                    v = velocity[(i, k)]
                    v *= momentum
                    v += scale * gk
                    spec.params[k] = spec.params[k] - rate * v
            total += loss * len(idx)
            step += 1
        losses.append(total / len(xs))
        if not math.isfinite(losses[-1]):
            raise TrainingDiverged(epoch, losses[-1])
        log.info("epoch %d loss %.4f", epoch, losses[-1])
    return losses


def train_fixture(
    arch: str,
    dataset,
    epochs: int = 10,
    lr: float = 0.05,
    seed: int = 0,
    eval_data=None,
    floor: float | None = None,
    batch_size: int = 32,
    holdout: float = 0.2,
    model: Model | None = None,
) -> Model:
    """Train a fixture classifier and check it on held-out data.

    Without ``eval_data`` a seeded ``holdout`` share of ``dataset`` is kept
    back.  Raises :class:`AccuracyBelowFloor` when the held-out accuracy
    misses ``floor`` (by default the architecture's entry in ACCURACY_FLOORS).
    """
    xs, ys = _arrays(dataset)
    if len(np.unique(ys)) < 2:
        raise ValueError("training needs at least two classes")
    if eval_data is None:
        tr, ev = holdout_split(len(xs), holdout, seed)
        (xs, ys), (ex, ey) = (xs[tr], ys[tr]), (xs[ev], ys[ev])
    else:
        ex, ey = _arrays(eval_data)
    n_classes = int(max(ys.max(), ey.max())) + 1
    if model is None:
        model = build(arch, xs.shape[1:], n_classes, seed)
    losses = sgd(model, xs, ys, epochs, lr, seed, batch_size)
    acc = accuracy(model, ex, ey)
    model.meta.update({"heldout_accuracy": acc, "epochs": epochs, "seed": seed})
    floor = ACCURACY_FLOORS.get(arch, 0.0) if floor is None else floor
    if acc < floor:
        raise AccuracyBelowFloor(acc, floor)
    log.info("held-out accuracy %.3f (losses %s)", acc, [round(l, 4) for l in losses])
    return model


# data size, epochs and learning rate of the stock fixtures
FIXTURES = {
    "mlp": {"n": 400, "epochs": 20, "lr": 0.05},
    "cnn": {"n": 3000, "epochs": 8, "lr": 0.05},
    "tiny-vit": {"n": 3000, "epochs": 30, "lr": 0.03},
}


def fixture_data(arch: str, n: int, seed: int = 0):
    from .synthetic import make_blobs, make_digits

    return make_blobs(n, seed=seed) if arch == "mlp" else make_digits(n, seed=seed)


def fixture_model(arch: str, seed: int = 0) -> Model:
    """Train the stock fixture for ``arch`` on seeded synthetic data."""
    r = FIXTURES[arch]
    return train_fixture(arch, fixture_data(arch, r["n"], seed), r["epochs"], r["lr"], seed)
