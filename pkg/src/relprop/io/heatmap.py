"""Signed heatmaps blended over a grayscale underlay, written as PPM."""

from __future__ import annotations

import numpy as np

from .pnm import encode


def _spatial(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.sum(axis=0) if a.ndim == 3 else a


def heatmap_rgb(attribution: np.ndarray, underlay: np.ndarray | None = None) -> np.ndarray:
    """uint8 (H, W, 3) image.

    Opacity is |a| / max|a|.  Positive values blend toward a white-to-red
    ramp and negative ones toward white-to-blue, so the extreme value is
    pure red (or blue) and zero leaves the underlay untouched.
    """
    a = _spatial(attribution)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"attribution of shape {np.shape(attribution)} is not a non-empty image")
    h, w = a.shape
    if underlay is None:
        gray = np.ones((h, w))
    else:
        u = np.asarray(underlay, dtype=np.float64)
        gray = u.mean(axis=0) if u.ndim == 3 else u
        if gray.shape != (h, w):
            raise ValueError(f"underlay {gray.shape} does not match attribution {(h, w)}")
    peak = np.abs(a).max()
    alpha = np.abs(a) / peak if peak > 0 else np.zeros_like(a)
    fade = 1.0 - alpha
    color = np.stack([np.ones_like(a), fade, fade], axis=-1)  # red ramp
    neg = a < 0
    color[neg] = np.stack([fade[neg], fade[neg], np.ones(neg.sum())], axis=-1)
    base = np.repeat(np.clip(gray, 0.0, 1.0)[..., None], 3, axis=-1)
    out = (1.0 - alpha[..., None]) * base + alpha[..., None] * color
    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


def export_heatmap(attribution: np.ndarray, underlay: np.ndarray | None, path) -> None:
    with open(path, "wb") as f:
        f.write(encode(heatmap_rgb(attribution, underlay)))
