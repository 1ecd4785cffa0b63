"""Manifest-backed canvas loading with a content-addressed preprocessing cache."""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Optional, Sequence

from .canvas import CanvasImage, read_image, write_png
from .dataset import ManifestEntry, SplitManifest
from .errors import DataError
from .preprocess import PreprocessConfig, preprocess_pipeline

log = logging.getLogger(__name__)


def content_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def read_entry(manifest: SplitManifest, entry: ManifestEntry) -> CanvasImage:
    path = manifest.resolve(entry)
    if not path.exists():
        raise DataError(f"canvas {entry.canvas_id!r}: file not found: {path}")
    img = read_image(path, entry.resolution, canvas_id=entry.canvas_id, class_label=entry.class_label)
    if "preprocess_hash" in entry.extra:
        img = img.with_pixels(img.pixels, preprocess_hash=entry.extra["preprocess_hash"])
    return img


def cache_path(cache_dir, source: Path, cfg: PreprocessConfig) -> Path:
    return Path(cache_dir) / f"{content_hash(source)}_{cfg.digest()}.png"


def prepared(manifest: SplitManifest, entry: ManifestEntry, cfg: PreprocessConfig, cache_dir=None) -> CanvasImage:
    """Preprocessed canvas for a manifest entry.

    Entries already carrying the matching preprocess hash are read as they
    are.  Otherwise the result is stored as a 16-bit PNG in ``cache_dir`` and
    read back, so a cache hit and a cache miss yield identical pixels.
    """
    digest = cfg.digest()
    if entry.extra.get("preprocess_hash") == digest:
        return read_entry(manifest, entry)
    src = manifest.resolve(entry)
    if not src.exists():
        raise DataError(f"canvas {entry.canvas_id!r}: file not found: {src}")
    if cache_dir is None:
        raise DataError(f"canvas {entry.canvas_id!r} is not preprocessed and no cache directory was given")
    target = cache_path(cache_dir, src, cfg)
    if not target.exists():
        out = preprocess_pipeline(read_entry(manifest, entry), cfg)
        write_png(target, out.pixels, bits=16)
        log.info("preprocessed %s -> %s", entry.canvas_id, target.name)
    img = read_image(target, cfg.target_resolution, canvas_id=entry.canvas_id, class_label=entry.class_label)
    return img.with_pixels(img.pixels, preprocess_hash=digest)


def load_entries(
    manifest: SplitManifest,
    entries: Sequence[ManifestEntry],
    cfg: PreprocessConfig,
    cache_dir=None,
) -> list[CanvasImage]:
    return [prepared(manifest, e, cfg, cache_dir) for e in entries]


def select(manifest: SplitManifest, split: Optional[str] = None, ids: Optional[Sequence[str]] = None) -> list[ManifestEntry]:
    if ids:
        try:
            return [manifest.get(i) for i in ids]
        except KeyError as exc:
            raise DataError(f"canvas {exc.args[0]!r} is not in the manifest") from None
    return manifest.split(split) if split else list(manifest.entries)
