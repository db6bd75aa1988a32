"""Binary model files.

Layout: the 8-byte magic ``RLPMODEL``, a little-endian u64 header length,
a UTF-8 JSON header, then one block per parameter in header order.  Each
block is a little-endian u64 byte count followed by that many bytes of
little-endian float64 data.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..layers import LayerSpec
from ..model import Model

MAGIC = b"RLPMODEL"
VERSION = 1
_U64 = struct.Struct("<Q")


class ModelFileError(ValueError):
    """Base class for unreadable model files."""


class VersionMismatch(ModelFileError):
    pass


class TruncatedPayload(ModelFileError):
    def __init__(self, message: str, block: str | None = None):
        self.block = block
        super().__init__(message)


class ShapeMismatch(ModelFileError):
    pass


class InvalidHeader(ModelFileError):
    pass


def _header(model: Model) -> dict:
    layers = []
    for spec in model.layers:
        layers.append(
            {
                "kind": spec.kind,
                "hyper": spec.hyper,
                "params": [{"name": k, "shape": list(v.shape)} for k, v in spec.params.items()],
            }
        )
    return {
        "version": VERSION,
        "arch": model.arch,
        "n_classes": model.n_classes,
        "input_shape": list(model.input_shape),
        "layers": layers,
        "meta": model.meta,
    }


def dumps(model: Model) -> bytes:
    head = json.dumps(_header(model), sort_keys=True).encode()
    parts = [MAGIC, _U64.pack(len(head)), head]
    for spec in model.layers:
        for v in spec.params.values():
            data = np.ascontiguousarray(v, dtype="<f8").tobytes()
            parts += [_U64.pack(len(data)), data]
    return b"".join(parts)


def save_model(model: Model, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(dumps(model))
    os.replace(tmp, path)


def _take(buf: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise TruncatedPayload(f"file ends inside {what}: need {n} bytes at offset {pos}, have {len(buf) - pos}", what)
    return buf[pos : pos + n], pos + n


def loads(buf: bytes) -> Model:
    if buf[:8] != MAGIC:
        raise InvalidHeader("not a model file (bad magic)")
    raw, pos = _take(buf, 8, 8, "header length")
    (hlen,) = _U64.unpack(raw)
    raw, pos = _take(buf, pos, hlen, "header")
    try:
        head = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidHeader(f"header is not valid JSON: {e}") from e
    if "version" not in head:
        raise InvalidHeader("header has no version field")
    if head["version"] != VERSION:
        raise VersionMismatch(f"file format version {head['version']!r}, this build reads {VERSION}")
    n_classes = head.get("n_classes")
    if not isinstance(n_classes, int) or n_classes < 1:
        raise InvalidHeader(f"header declares {n_classes!r} classes; need at least one")
    layers = []
    for i, entry in enumerate(head["layers"]):
        params = {}
        for p in entry["params"]:
            name = f"layer {i} ({entry['kind']}) parameter {p['name']!r}"
            raw, pos = _take(buf, pos, 8, name + " length")
            (n,) = _U64.unpack(raw)
            want = 8 * int(np.prod(p["shape"], dtype=np.int64))
            if n != want:
                raise ShapeMismatch(f"{name}: block holds {n} bytes, shape {p['shape']} needs {want}")
            raw, pos = _take(buf, pos, n, name)
            params[p["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(p["shape"])
        try:
            layers.append(LayerSpec(entry["kind"], params, dict(entry.get("hyper", {}))))
        except ValueError as e:
            raise ShapeMismatch(f"layer {i}: {e}") from e
    if pos != len(buf):
        raise ShapeMismatch(f"{len(buf) - pos} trailing bytes after the last parameter block")
    try:
        return Model(layers, tuple(head["input_shape"]), n_classes, head.get("arch", "custom"), head.get("meta", {}))
    except ValueError as e:
        raise InvalidHeader(str(e)) from e


def load_model(path) -> Model:
    with open(path, "rb") as f:
        return loads(f.read())
