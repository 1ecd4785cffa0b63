"""Siamese inception encoder.

One encoder, applied to both members of a pair, so the two branches share a
single parameter set by construction.  Any ``nn.Module`` mapping
``(B, 1, 100, 100)`` to ``(B, D)`` can stand in for the inception encoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .dataset import INSTANCE_SIDE
from .errors import CheckpointError, ShapeError

KERNEL_SIZES = (3, 5, 7)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    stage_filters: tuple = (8, 16, 32, 32, 64)
    conv_filters: int = 64
    conv_kernel: int = 3
    fc_widths: tuple = (1024, 256)
    embedding_dim: int = 128
    input_side: int = INSTANCE_SIDE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_filters"] = list(self.stage_filters)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        d["stage_filters"] = tuple(d["stage_filters"])
        d["fc_widths"] = tuple(d["fc_widths"])
        return cls(**d)

    def stage_channels(self) -> list[int]:
        return [3 * n for n in self.stage_filters]

    def final_side(self) -> int:
        side = self.input_side
        for _ in self.stage_filters:
            side //= 2
        return side


class InceptionBlock(nn.Module):
    """Parallel 3/5/7 same-padded convolutions, each with batch norm + ReLU.

    Output has ``3 * n_filters`` channels and the input's spatial size.
    """

    def __init__(self, in_channels: int, n_filters: int):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, n_filters, k, padding="same", bias=False),
                nn.BatchNorm2d(n_filters),
                nn.ReLU(inplace=True),
            )
            for k in KERNEL_SIZES
        )

    def forward(self, x):
        # 'same' padding needs every output to see at least the kernel centre
        # plus its radius of real pixels.
        min_side = max(KERNEL_SIZES) // 2 + 1
        if x.shape[-1] < min_side or x.shape[-2] < min_side:
            raise ShapeError(f"inception block needs spatial dims >= {min_side}, got {tuple(x.shape[-2:])}")
        return torch.cat([b(x) for b in self.branches], dim=1)


class InceptionEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec = EncoderSpec()):
        super().__init__()
        self.spec = spec
        stages = []
        c = 1
        for n in spec.stage_filters:
            stages.append(nn.Sequential(InceptionBlock(c, n), nn.MaxPool2d(2)))
            c = 3 * n
        self.stages = nn.ModuleList(stages)
        self.conv = nn.Sequential(nn.Conv2d(c, spec.conv_filters, spec.conv_kernel, padding="same"), nn.ReLU(inplace=True))
        side = spec.final_side()
        if side < 1:
            raise ShapeError(f"input side {spec.input_side} too small for {len(spec.stage_filters)} pooling stages")
        widths = [spec.conv_filters * side * side, *spec.fc_widths]
        fc = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            fc += [nn.Linear(w_in, w_out), nn.ReLU(inplace=True)]
        fc.append(nn.Linear(widths[-1], spec.embedding_dim))  # linear output layer
        self.head = nn.Sequential(nn.Flatten(), *fc)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[-2:] != (self.spec.input_side,) * 2:
            raise ShapeError(f"expected (B, 1, {self.spec.input_side}, {self.spec.input_side}), got {tuple(x.shape)}")
        for stage in self.stages:
            x = stage(x)
        return self.head(self.conv(x))

    def stage_shapes(self, batch: int = 1) -> list[tuple]:
        """Output shape after every inception stage (before pooling)."""
        shapes = []
        x = torch.zeros(batch, 1, self.spec.input_side, self.spec.input_side)
        with torch.no_grad():
            for stage in self.stages:
                block, pool = stage
                x = block(x)
                shapes.append(tuple(x.shape))
                x = pool(x)
        return shapes


def pair_distance(va: torch.Tensor, vb: torch.Tensor) -> torch.Tensor:
    """Row-wise Euclidean distance between two (B, D) embedding stacks."""
    return torch.linalg.vector_norm(va - vb, dim=-1)


class SiameseNet(nn.Module):
    """Two weight-tied branches; the output is the embedding distance."""

    def __init__(self, encoder: Optional[nn.Module] = None, spec: EncoderSpec = EncoderSpec()):
        super().__init__()
        self.encoder = encoder if encoder is not None else InceptionEncoder(spec)
        self.spec = getattr(self.encoder, "spec", spec)
        self.preprocess_hash: Optional[str] = None
        self.metadata: dict = {}

    def forward(self, xa, xb):
        return pair_distance(*self.embed_pair(xa, xb))

    def embed_pair(self, xa, xb):
        # One pass over the concatenation keeps batch-norm statistics shared
        # between the branches in training mode.
        n = xa.shape[0]
        v = self.encoder(torch.cat([xa, xb], dim=0))
        return v[:n], v[n:]


def as_tensor(instances) -> torch.Tensor:
    x = torch.as_tensor(np.ascontiguousarray(instances), dtype=torch.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    return x


def embed(model: SiameseNet, instances, batch_size: int = 128) -> np.ndarray:
    """Inference-mode embeddings for a stack of 100x100 instances."""
    arr = np.asarray(instances, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    side = model.spec.input_side
    if arr.ndim != 3 or arr.shape[1:] != (side, side):
        raise ShapeError(f"instances must be {side}x{side}, got {arr.shape}")
    check_finite(model)
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(arr), batch_size):
                out.append(model.encoder(as_tensor(arr[i : i + batch_size])).double().numpy())
    finally:
        model.train(was_training)
    if not out:
        dim = getattr(model.spec, "embedding_dim", 0)
        return np.empty((0, dim))
    return np.concatenate(out)


def pairwise_distance(va, vb) -> float:
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    if va.shape != vb.shape:
        raise ShapeError(f"embedding lengths differ: {va.shape} vs {vb.shape}")
    return float(np.sqrt(np.sum((va - vb) ** 2)))


def siamese_forward(model: SiameseNet, xa, xb) -> float:
    va, vb = embed(model, np.stack([xa, xb]))
    return pairwise_distance(va, vb)


def check_finite(model: nn.Module) -> None:
    for name, t in list(model.state_dict().items()):
        if t.is_floating_point() and not torch.isfinite(t).all():
            raise CheckpointError(f"parameter {name} holds non-finite values")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(model: SiameseNet, path, metadata: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(model.metadata)
    meta.update(metadata or {})
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "encoder_spec": model.spec.to_dict(),
            "state_dict": model.state_dict(),
            "preprocess_hash": model.preprocess_hash,
            "metadata": meta,
        },
        path,
    )


def load_checkpoint(path) -> SiameseNet:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types here
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "version" not in blob:
        raise CheckpointError(f"{path}: not a canvasweave checkpoint (no version field)")
    if blob["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob['version']}")
    model = SiameseNet(spec=EncoderSpec.from_dict(blob["encoder_spec"]))
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the encoder spec: {exc}") from exc
    check_finite(model)
    model.preprocess_hash = blob.get("preprocess_hash")
    model.metadata = dict(blob.get("metadata") or {})
    model.eval()
    return model
