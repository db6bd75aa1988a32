"""Netpbm (PGM/PPM) reading and writing, 8-bit only."""

from __future__ import annotations

import numpy as np

_MAGICS = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}


class UnsupportedImage(ValueError):
    pass


def _tokens(buf: bytes, pos: int, count: int) -> tuple[list[bytes], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise UnsupportedImage("truncated header")
        out.append(buf[start:pos])
    return out, pos


def decode(buf: bytes) -> np.ndarray:
    """Decode to uint8 (H, W) for grayscale or (H, W, 3) for colour."""
    magic = buf[:2]
    if magic not in _MAGICS:
        raise UnsupportedImage(f"unknown magic {magic!r}")
    channels, binary = _MAGICS[magic]
    try:
        (w, h, maxval), pos = _tokens(buf, 2, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise UnsupportedImage(f"bad header: {e}") from e
    if maxval > 255:
        raise UnsupportedImage(f"maxval {maxval}: only 8-bit images are supported")
    if w <= 0 or h <= 0 or maxval <= 0:
        raise UnsupportedImage("zero-size image or maxval")
    n = w * h * channels
    if binary:
        data = np.frombuffer(buf, dtype=np.uint8, count=-1, offset=pos + 1)
        if data.size < n:
            raise UnsupportedImage("truncated pixel data")
        data = data[:n]
    else:
        vals, _ = _tokens(buf, pos, n)
        data = np.array([int(v) for v in vals], dtype=np.int64)
        if data.max(initial=0) > maxval:
            raise UnsupportedImage("sample exceeds maxval")
    if maxval != 255:
        data = np.rint(data.astype(np.float64) * 255.0 / maxval)
    img = data.astype(np.uint8).reshape(h, w, channels)
    return img[..., 0] if channels == 1 else img


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read())


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("encode expects uint8 pixels")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {img.shape}")
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("zero-size image")
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def write_pnm(path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode(img))


def to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 (H, W[, 3]) -> float64 (C, H, W) in [0, 1]."""
    a = img.astype(np.float64) / 255.0
    return a[None] if a.ndim == 2 else a.transpose(2, 0, 1)


def from_unit(x: np.ndarray) -> np.ndarray:
    """float (C, H, W) in [0, 1] -> uint8 (H, W) or (H, W, 3)."""
    x = np.asarray(x, dtype=np.float64)
    q = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 2:
        return q
    return q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0)
