"""Synthetic fabric classes used for desk-scale experiments.

Densities follow measured thread counts of plain-weave canvases; the
variations in tension and thread width give classes that differ in texture
as well as in density.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

from .canvas import CanvasImage
from .dataset import derive_seed
from .synthweave import WeaveSpec, generate_weave


@dataclass(frozen=True)
class FabricClass:
    name: str
    spec: WeaveSpec

    def to_dict(self) -> dict:
        return {"name": self.name, "spec": self.spec.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FabricClass":
        return cls(d["name"], WeaveSpec(**d["spec"]))


def _cls(name, warp, weft, **kw):
    base = dict(density_jitter=0.01, noise_level=0.05)
    base.update(kw)
    return FabricClass(name, WeaveSpec(warp, weft, **base))


DESK_CLASSES = (
    _cls("mpret", 12.12, 13.68),
    _cls("tense", 10.16, 12.90, tension_ratio=2.0),
    _cls("coarse", 6.65, 8.98),
    _cls("fine", 20.71, 21.10),
    _cls("skew", 14.85, 18.36),
    _cls("wideweft", 10.75, 13.09, warp_width=0.45, weft_width=0.95),
)

# Same densities, different texture: only the tension separates them.
HARD_PAIR = (
    _cls("slack", 10.7, 13.0, tension_ratio=1.0),
    _cls("taut", 10.7, 13.0, tension_ratio=3.0),
)

PRESETS = {"desk": DESK_CLASSES, "hard": HARD_PAIR, "all": DESK_CLASSES + HARD_PAIR}

DEFAULT_SPLITS = ("train", "train", "validation", "test", "test")


@dataclass
class RenderedCanvas:
    image: CanvasImage
    split: str
    spec: WeaveSpec
    class_name: str
    extra: dict = field(default_factory=dict)


def render_classes(
    classes: Sequence[FabricClass],
    seed: int,
    splits: Sequence[str] = DEFAULT_SPLITS,
    size_cm: tuple[float, float] = (4.0, 4.0),
) -> list[RenderedCanvas]:
    """One canvas per entry of ``splits`` for every class, labelled by position."""
    out = []
    for label, fc in enumerate(classes):
        for k, split in enumerate(splits):
            spec = replace(fc.spec, seed=derive_seed(seed, "synth", fc.name, k))
            cid = f"{fc.name}_{k}"
            img = generate_weave(spec, size_cm[0], size_cm[1], canvas_id=cid, class_label=label)
            out.append(RenderedCanvas(img, split, spec, fc.name))
    return out
