"""File I/O for models, images and datasets."""

from .dataset import Dataset, Example, load_dataset, load_image, resize_nearest, write_dataset
from .heatmap import export_heatmap, heatmap_rgb
from .modelfile import (
    InvalidHeader,
    ModelFileError,
    ShapeMismatch,
    TruncatedPayload,
    VersionMismatch,
    dumps,
    load_model,
    loads,
    save_model,
)
from .pnm import UnsupportedImage, decode, encode, read_pnm, write_pnm
