"""Samples, instances, augmentation and labeled pairs.

A *sample* is a random 300x300 patch of a preprocessed canvas.  Each sample
expands deterministically into 10 *instances* of 100x100 (four corners, the
centre, and the horizontal flip of each).  Instances are then randomly
flipped vertically and/or rotated by 90 degrees when pairs are assembled.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .canvas import CanvasImage
from .errors import ConfigError, SizeError

SAMPLE_SIDE = 300
INSTANCE_SIDE = 100
CROPS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any mix of ints and strings."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class Sample:
    pixels: np.ndarray
    source_canvas: str
    origin: tuple[int, int]

    def __post_init__(self):
        if self.pixels.shape != (SAMPLE_SIDE, SAMPLE_SIDE):
            raise SizeError(f"sample must be {SAMPLE_SIDE}x{SAMPLE_SIDE}, got {self.pixels.shape}")


@dataclass
class Instance:
    pixels: np.ndarray
    source: Optional[Sample] = None
    crop: str = "top_left"
    hflip: bool = False
    vflip: bool = False
    rot90: bool = False

    @property
    def transform_tag(self) -> str:
        tag = self.crop + ("+hflip" if self.hflip else "")
        if self.vflip:
            tag += "+vflip"
        if self.rot90:
            tag += "+rot90"
        return tag


def draw_samples(img: CanvasImage, M: int, seed: int) -> list[Sample]:
    """M uniformly placed 300x300 patches, drawn with replacement."""
    h, w = img.shape
    if h < SAMPLE_SIDE or w < SAMPLE_SIDE:
        raise SizeError(f"canvas {img.canvas_id!r} is {h}x{w}; samples need {SAMPLE_SIDE} px per side")
    if M < 0:
        raise ConfigError("M must be >= 0")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - SAMPLE_SIDE + 1, size=M)
    cols = rng.integers(0, w - SAMPLE_SIDE + 1, size=M)
    return [
        Sample(img.pixels[r : r + SAMPLE_SIDE, c : c + SAMPLE_SIDE].copy(), img.canvas_id, (int(r), int(c)))
        for r, c in zip(rows, cols)
    ]


def _crop_offsets():
    far = SAMPLE_SIDE - INSTANCE_SIDE
    mid = far // 2
    return {
        "top_left": (0, 0),
        "top_right": (0, far),
        "bottom_left": (far, 0),
        "bottom_right": (far, far),
        "center": (mid, mid),
    }


def expand_array(samples: np.ndarray) -> np.ndarray:
    """Vectorized 10-way expansion: (n, 300, 300) -> (n * 10, 100, 100).

    Output order per sample matches ``expand_instances``.
    """
    samples = np.asarray(samples)
    offs = _crop_offsets()
    s = INSTANCE_SIDE
    crops = [samples[:, r : r + s, c : c + s] for r, c in (offs[k] for k in CROPS)]
    crops += [c[:, :, ::-1] for c in crops]
    return np.stack(crops, axis=1).reshape(-1, s, s)


def expand_instances(sample: Sample) -> list[Instance]:
    offs = _crop_offsets()
    s = INSTANCE_SIDE
    plain = []
    for name in CROPS:
        r, c = offs[name]
        plain.append(Instance(sample.pixels[r : r + s, c : c + s], sample, crop=name))
    flipped = [Instance(inst.pixels[:, ::-1], sample, crop=inst.crop, hflip=True) for inst in plain]
    return plain + flipped


def apply_transform(pixels: np.ndarray, vflip: bool, rot90: bool) -> np.ndarray:
    """Vertical flip first, then a 90 degree counter-clockwise rotation."""
    out = pixels[::-1, :] if vflip else pixels
    if rot90:
        out = np.rot90(out)
    return out


def augment_flags(seed: int) -> tuple[bool, bool]:
    vflip, rot = np.random.default_rng(seed).random(2) < 0.5
    return bool(vflip), bool(rot)


def augment(inst: Instance, seed: int) -> Instance:
    """Random vertical flip and/or 90 degree rotation, each with p = 1/2.

    Meant for freshly expanded instances; the flags describe this call only.
    """
    vflip, rot = augment_flags(seed)
    return Instance(
        apply_transform(inst.pixels, vflip, rot),
        inst.source,
        crop=inst.crop,
        hflip=inst.hflip,
        vflip=vflip,
        rot90=rot,
    )


def _augment_stack(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flags = rng.random((len(x), 2)) < 0.5
    out = np.empty_like(x)
    for i, (vf, rt) in enumerate(flags):
        out[i] = apply_transform(x[i], vf, rt)
    return out


@dataclass
class PairBatch:
    """Stacked pairs; ``y == 0`` marks pairs from the same fabric class."""

    a: np.ndarray
    b: np.ndarray
    y: np.ndarray
    class_a: np.ndarray
    class_b: np.ndarray

    def __len__(self):
        return len(self.y)

    def check_labels(self) -> bool:
        return bool(np.all((self.y == 0) == (self.class_a == self.class_b)))


def make_pair_batch(
    pools: Mapping[int, np.ndarray],
    p_same: float = 0.75,
    batch: int = 256,
    seed: int = 0,
    batch_index: int = 0,
    augment: bool = True,
) -> PairBatch:
    """Draw ``batch`` labeled pairs from per-class instance pools.

    Each pair is same-class with probability ``p_same`` (class chosen
    uniformly, two distinct instances from it), otherwise the two members
    come from two distinct classes.  The stream is a pure function of
    ``(seed, batch_index)``.
    """
    labels = sorted(pools)
    if len(labels) < 2:
        raise ConfigError("pair generation needs at least two classes")
    for c in labels:
        if len(pools[c]) < 2:
            raise ConfigError(f"class {c} has fewer than two instances")
    if not 0.0 <= p_same <= 1.0:
        raise ConfigError("p_same must lie in [0, 1]")

    rng = np.random.default_rng([seed, batch_index])
    same = rng.random(batch) < p_same
    ia, ib, ca, cb = [], [], [], []
    for s in same:
        if s:
            c = labels[rng.integers(len(labels))]
            i, j = rng.choice(len(pools[c]), size=2, replace=False)
            ca.append(c), cb.append(c)
        else:
            c1, c2 = rng.choice(len(labels), size=2, replace=False)
            c1, c2 = labels[c1], labels[c2]
            i = rng.integers(len(pools[c1]))
            j = rng.integers(len(pools[c2]))
            ca.append(c1), cb.append(c2)
        ia.append(i), ib.append(j)

    a = np.stack([pools[c][i] for c, i in zip(ca, ia)]) if batch else np.empty((0, INSTANCE_SIDE, INSTANCE_SIDE))
    b = np.stack([pools[c][j] for c, j in zip(cb, ib)]) if batch else np.empty((0, INSTANCE_SIDE, INSTANCE_SIDE))
    if augment and batch:
        a = _augment_stack(a, rng)
        b = _augment_stack(b, rng)
    return PairBatch(a, b, (~same).astype(np.int64), np.asarray(ca), np.asarray(cb))


def build_pools(canvases: Sequence[CanvasImage], M: int, seed: int) -> dict[int, np.ndarray]:
    """Per-class float32 instance stacks from preprocessed canvases.

    Sample placement on each canvas depends only on ``seed`` and its id.
    """
    by_class: dict[int, list[np.ndarray]] = {}
    for img in canvases:
        if img.class_label is None:
            raise ConfigError(f"canvas {img.canvas_id!r} has no class label")
        samples = draw_samples(img, M, derive_seed(seed, "samples", img.canvas_id))
        if not samples:
            continue
        inst = expand_array(np.stack([s.pixels for s in samples])).astype(np.float32)
        by_class.setdefault(int(img.class_label), []).append(inst)
    return {c: np.concatenate(v) for c, v in by_class.items()}


# --- manifest -------------------------------------------------------------

SPLITS = ("train", "validation", "test")
MANIFEST_FIELDS = ["path", "canvas_id", "class_label", "split", "resolution"]


@dataclass
class ManifestEntry:
    path: str
    canvas_id: str
    class_label: Optional[int]
    split: str
    resolution: float
    extra: dict = field(default_factory=dict)


@dataclass
class SplitManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ConfigError(f"canvas {e.canvas_id!r}: unknown split {e.split!r}")
            if e.canvas_id in seen:
                raise ConfigError(
                    f"canvas {e.canvas_id!r} listed twice ({seen[e.canvas_id]} and {e.split})"
                )
            seen[e.canvas_id] = e.split
            if not e.resolution > 0:
                raise ConfigError(f"canvas {e.canvas_id!r}: resolution must be > 0")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def get(self, canvas_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.canvas_id == canvas_id:
                return e
        raise KeyError(canvas_id)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def classes(self, split: str) -> set:
        return {e.class_label for e in self.split(split)}

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        extra_keys = sorted({k for e in self.entries for k in e.extra})
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(MANIFEST_FIELDS + extra_keys)
            for e in self.entries:
                label = "" if e.class_label is None else e.class_label
                wr.writerow([e.path, e.canvas_id, label, e.split, repr(float(e.resolution))] + [e.extra.get(k, "") for k in extra_keys])

    @classmethod
    def read(cls, path, root=None) -> "SplitManifest":
        path = Path(path)
        entries = []
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            missing = set(MANIFEST_FIELDS) - set(rd.fieldnames or [])
            if missing:
                raise ConfigError(f"{path}: manifest lacks columns {sorted(missing)}")
            for row in rd:
                label = row.pop("class_label").strip()
                entries.append(
                    ManifestEntry(
                        path=row.pop("path"),
                        canvas_id=row.pop("canvas_id"),
                        class_label=int(label) if label else None,
                        split=row.pop("split").strip(),
                        resolution=float(row.pop("resolution")),
                        extra={k: v for k, v in row.items() if v != ""},
                    )
                )
        return cls(entries, Path(root) if root else path.parent)
