"""Seeded procedural datasets: seven-segment stroke digits and Gaussian blobs."""

from __future__ import annotations

import numpy as np

# segment endpoints in a glyph frame of width 0.6 and height 1, origin at the glyph centre
_X0, _X1, _Y0, _YM, _Y1 = -0.3, 0.3, -0.5, 0.0, 0.5
SEGMENTS = {
    "a": ((_X0, _Y0), (_X1, _Y0)),
    "b": ((_X1, _Y0), (_X1, _YM)),
    "c": ((_X1, _YM), (_X1, _Y1)),
    "d": ((_X0, _Y1), (_X1, _Y1)),
    "e": ((_X0, _YM), (_X0, _Y1)),
    "f": ((_X0, _Y0), (_X0, _YM)),
    "g": ((_X0, _YM), (_X1, _YM)),
}
DIGITS = ("abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg")


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def render_digit(
    digit: int,
    size: int = 28,
    scale: float = 1.0,
    shift=(0.0, 0.0),
    angle: float = 0.0,
    thickness: float = 1.6,
    glyph_height: float = 20.0,
) -> np.ndarray:
    """Antialiased (size, size) image of ``digit``; distances are measured in pixels."""
    h = glyph_height * scale
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = size / 2 + shift[0], size / 2 + shift[1]
    c, s = np.cos(angle), np.sin(angle)
    u = ((xs - cx) * c + (ys - cy) * s) / h
    v = (-(xs - cx) * s + (ys - cy) * c) / h
    dist = np.full((size, size), np.inf)
    for seg in DIGITS[digit]:
        dist = np.minimum(dist, _segment_distance(u, v, *SEGMENTS[seg]) * h)
    return np.clip(thickness * max(scale, 0.5) - dist + 0.5, 0.0, 1.0)


def make_digits(n: int, seed: int = 0, size: int = 28, scale_range=(0.4, 1.0), max_angle: float = 0.2, noise: float = 0.05):
    """``n`` stroke digits with balanced labels, shape (n, 1, size, size), values in [0, 1].

    Smaller glyphs get proportionally more room to move, so quarter-size
    copies (as found in a 2x2 mosaic) fall inside the training distribution.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = np.empty((n, 1, size, size))
    for i, d in enumerate(labels):
        scale = rng.uniform(*scale_range)
        room = (1.0 - scale) * size * 0.45
        shift = rng.uniform(-room, room, size=2)
        img = render_digit(int(d), size, scale, shift, rng.uniform(-max_angle, max_angle))
        if noise:
            img = np.clip(img + rng.normal(0.0, noise, img.shape), 0.0, 1.0)
        images[i, 0] = img
    return images, labels


def make_blobs(n: int, dim: int = 2, seed: int = 0, separation: float = 4.0, std: float = 0.5):
    """Two Gaussian classes centred at +-separation/2 along a random unit direction."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    centres = np.where(labels[:, None] == 1, 1.0, -1.0) * direction * separation / 2
    return centres + rng.normal(0.0, std, size=(n, dim)), labels
