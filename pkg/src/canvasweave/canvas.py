"""Grayscale canvas images and their on-disk form."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DataError, MetadataError


@dataclass
class CanvasImage:
    """A grayscale X-ray plate (or synthetic stand-in) with physical scale.

    ``pixels`` holds intensities in [0, 1]; ``resolution`` is in px/cm.
    ``preprocess_hash`` is set by the preprocessing pipeline so downstream
    consumers can check that a checkpoint saw images prepared the same way.
    """

    pixels: np.ndarray
    resolution: float
    canvas_id: str = ""
    class_label: Optional[int] = None
    preprocess_hash: Optional[str] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise DataError(f"canvas {self.canvas_id!r}: expected a 2-D grid, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError(f"canvas {self.canvas_id!r}: non-finite intensities")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError(f"canvas {self.canvas_id!r}: intensities outside [0, 1]")
        if self.resolution is None or not self.resolution > 0:
            raise MetadataError(f"canvas {self.canvas_id!r}: unknown or non-positive resolution")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def extent_cm(self) -> tuple[float, float]:
        h, w = self.pixels.shape
        return h / self.resolution, w / self.resolution

    def with_pixels(self, pixels: np.ndarray, **changes) -> "CanvasImage":
        return replace(self, pixels=pixels, **changes)


def read_image(path, resolution: float, canvas_id: str = "", class_label=None) -> CanvasImage:
    """Load an 8/16-bit grayscale PNG or TIFF as a CanvasImage.

    The resolution comes from the caller (the manifest), never from file
    metadata.
    """
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        # Drop alpha, average colour channels.
        arr = arr[..., :3].mean(axis=2)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32, np.int16):
        scale = 65535.0
    elif np.issubdtype(arr.dtype, np.floating):
        scale = 1.0
    elif arr.dtype == bool:
        scale = 1.0
    else:
        raise DataError(f"{path}: unsupported pixel type {arr.dtype}")
    pixels = np.clip(arr.astype(np.float64) / scale, 0.0, 1.0)
    return CanvasImage(pixels, resolution, canvas_id=canvas_id or Path(path).stem, class_label=class_label)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def to_uint16(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 65535.0), 0, 65535).astype(np.uint16)


def write_png(path, pixels: np.ndarray, bits: int = 8) -> None:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_uint8(pixels) if bits == 8 else to_uint16(pixels)
    # Fixed encoder settings and no metadata chunks keep reruns byte-identical.
    Image.fromarray(data).save(path, format="PNG", optimize=False, compress_level=6)
