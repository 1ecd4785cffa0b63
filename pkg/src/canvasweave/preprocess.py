"""Fabric-enhancing normalization applied to every X-ray before sampling.

The chain is resample -> local mean/std normalization -> global histogram
equalization.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from skimage import exposure, transform

from .canvas import CanvasImage
from .errors import ConfigError, MetadataError

log = logging.getLogger(__name__)

EPS = 1e-6
CLIP_SIGMA = 3.0


@dataclass(frozen=True)
class PreprocessConfig:
    target_resolution: float = 200.0
    norm_window_cm: float = 0.5
    equalize_bins: int = 256

    def validate(self) -> None:
        if not self.target_resolution > 0:
            raise ConfigError("target_resolution must be > 0")
        if not self.norm_window_cm > 0:
            raise ConfigError("norm_window_cm must be > 0")
        if self.equalize_bins < 2:
            raise ConfigError("equalize_bins must be >= 2")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def resample(img: CanvasImage, target: float = 200.0) -> CanvasImage:
    """Bilinear resampling to ``target`` px/cm, preserving physical extent."""
    if img.resolution is None or not img.resolution > 0:
        raise MetadataError(f"canvas {img.canvas_id!r} has no usable resolution")
    if img.resolution == target:
        return img
    factor = target / img.resolution
    h, w = img.shape
    shape = (max(1, int(round(h * factor))), max(1, int(round(w * factor))))
    out = transform.resize(
        img.pixels,
        shape,
        order=1,
        mode="reflect",
        anti_aliasing=factor < 1,
        preserve_range=True,
    )
    return img.with_pixels(np.clip(out, 0.0, 1.0), resolution=target)


def window_px(img: CanvasImage, window_cm: float) -> int:
    return int(round(window_cm * img.resolution))


def local_normalize(img: CanvasImage, window_cm: float = 0.5) -> CanvasImage:
    """Subtract the local mean, divide by the local std, map +-3 sigma to [0, 1]."""
    win = window_px(img, window_cm)
    h, w = img.shape
    if win < 3 or win >= min(h, w):
        raise ConfigError(f"normalization window of {win} px unusable for a {h}x{w} image")
    x = img.pixels
    mean = ndimage.uniform_filter(x, size=win, mode="reflect")
    sq = ndimage.uniform_filter(x * x, size=win, mode="reflect")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    z = (x - mean) / (std + EPS)
    out = np.clip((z + CLIP_SIGMA) / (2 * CLIP_SIGMA), 0.0, 1.0)
    return img.with_pixels(out)


def is_degenerate(pixels: np.ndarray) -> bool:
    return bool(np.ptp(pixels) <= 1e-12)


def equalize(img: CanvasImage, bins: int = 256) -> CanvasImage:
    """Global histogram equalization (monotone CDF mapping)."""
    if is_degenerate(img.pixels):
        log.warning("canvas %r has constant intensity; equalization skipped", img.canvas_id)
        return img
    out = exposure.equalize_hist(img.pixels, nbins=bins)
    return img.with_pixels(np.clip(out, 0.0, 1.0))


def preprocess_pipeline(img: CanvasImage, cfg: PreprocessConfig = PreprocessConfig()) -> CanvasImage:
    cfg.validate()
    out = resample(img, cfg.target_resolution)
    if is_degenerate(out.pixels):
        log.warning("canvas %r is degenerate (constant); returning mid-gray", img.canvas_id)
        return out.with_pixels(np.full(out.shape, 0.5), preprocess_hash=cfg.digest())
    out = local_normalize(out, cfg.norm_window_cm)
    out = equalize(out, cfg.equalize_bins)
    return out.with_pixels(out.pixels, preprocess_hash=cfg.digest())
