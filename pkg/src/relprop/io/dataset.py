"""Class-per-subdirectory image datasets."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pnm import UnsupportedImage, encode, from_unit, read_pnm, to_unit

log = logging.getLogger(__name__)

SUFFIXES = (".pgm", ".ppm", ".pnm")


@dataclass(frozen=True)
class Example:
    image: np.ndarray  # (C, H, W) float64 in [0, 1]
    label: int
    path: str

    def __iter__(self):  # unpacks as (image, label, path)
        return iter((self.image, self.label, self.path))


@dataclass
class Dataset:
    root: Path
    classes: list[str]
    examples: list[Example]
    skipped: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.examples)

    def __len__(self):
        return len(self.examples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.stack([e.image for e in self.examples]), np.array([e.label for e in self.examples], dtype=int)


def resize_nearest(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of a (C, H, W) array; pixel centres map back to source pixels."""
    _, sh, sw = x.shape
    if (sh, sw) == (h, w):
        return x
    rows = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(int), sh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(int), sw - 1)
    return x[:, rows][:, :, cols]


def conform(x: np.ndarray, input_shape) -> np.ndarray:
    """Match channel count and spatial size of ``input_shape`` (C, H, W)."""
    c, h, w = input_shape
    if x.shape[0] != c:
        if c == 1:
            x = x.mean(axis=0, keepdims=True)
        elif x.shape[0] == 1:
            x = np.repeat(x, c, axis=0)
        else:
            raise ValueError(f"cannot map {x.shape[0]} channels to {c}")
    return resize_nearest(x, h, w)


def load_image(path, input_shape=None) -> np.ndarray:
    x = to_unit(read_pnm(path))
    return conform(x, input_shape) if input_shape is not None else x


def _manifest_split(root: Path, split: str | None) -> set[str] | None:
    if split is None:
        return None
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"split {split!r} requested but {mf} does not exist")
    spec = json.loads(mf.read_text())
    try:
        return {str(Path(p)) for p in spec["split"][split]}
    except KeyError as e:
        raise ValueError(f"manifest has no split {split!r}") from e


def load_dataset(path, input_shape, split: str | None = None) -> Dataset:
    """Read every image under ``path/<class>/``; classes and files in lexicographic order.

    Undecodable files are skipped, logged and listed in ``Dataset.skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"{root} has no class subdirectories")
    keep = _manifest_split(root, split)
    examples, skipped = [], []
    for label, cls in enumerate(classes):
        files = sorted(p for p in (root / cls).iterdir() if p.is_file() and p.suffix.lower() in SUFFIXES)
        if not files:
            raise ValueError(f"class directory {cls!r} is empty")
        for f in files:
            rel = str(f.relative_to(root))
            if keep is not None and rel not in keep:
                continue
            try:
                img = load_image(f, input_shape)
            except (UnsupportedImage, ValueError, OSError) as e:
                log.warning("skipping %s: %s", rel, e)
                skipped.append(rel)
                continue
            examples.append(Example(img, label, rel))
    if skipped:
        log.warning("%d undecodable image(s) skipped", len(skipped))
    return Dataset(root, classes, examples, skipped)


def write_dataset(path, images: np.ndarray, labels: np.ndarray, eval_fraction: float = 0.0, class_names=None) -> Path:
    """Write (N, C, H, W) images in [0, 1] as a class-per-directory dataset.

    With ``eval_fraction`` > 0 a manifest assigns the last share of each
    class to the eval split.
    """
    root = Path(path)
    labels = np.asarray(labels, dtype=int)
    n_classes = int(labels.max()) + 1
    names = class_names or [f"{c:02d}" for c in range(n_classes)]
    split: dict[str, list[str]] = {"train": [], "eval": []}
    for c in range(n_classes):
        d = root / names[c]
        d.mkdir(parents=True, exist_ok=True)
        idx = np.flatnonzero(labels == c)
        n_eval = int(round(eval_fraction * len(idx)))
        for j, i in enumerate(idx):
            img = images[i]
            ext = ".pgm" if img.shape[0] == 1 else ".ppm"
            name = f"{names[c]}/{j:05d}{ext}"
            (root / name).write_bytes(encode(from_unit(img)))
            split["eval" if j >= len(idx) - n_eval else "train"].append(name)
    if eval_fraction > 0:
        (root / "manifest.json").write_text(json.dumps({"split": split}, indent=1, sort_keys=True))
    return root
