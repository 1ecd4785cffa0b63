"""Contrastive training of the Siamese encoder with validation model selection."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .canvas import CanvasImage
from .dataset import PairBatch, build_pools, derive_seed, make_pair_batch
from .errors import ConfigError, NumericalError
from .model import EncoderSpec, SiameseNet, as_tensor, check_finite

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    batch_size: int = 256
    lr0: float = 6e-5
    lr_decay_factor: float = 3.0
    lr_decay_every: int = 25
    early_stop_patience: int = 20
    momentum: float = 0.9
    p_same: float = 0.75
    M: int = 80
    seed: int = 0
    batches_per_epoch: int = 50
    max_epochs: int = 500
    val_pairs: int = 512
    eval_batch: int = 128
    augment: bool = True
    # Dry run: forward passes only, parameters never change.
    frozen: bool = False

    def validate(self) -> None:
        for name in ("margin", "lr0", "lr_decay_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch_size", "lr_decay_every", "early_stop_patience", "M", "batches_per_epoch", "max_epochs", "val_pairs"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0 < self.p_same < 1:
            raise ConfigError("p_same must lie in (0, 1)")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# --- loss -----------------------------------------------------------------


def _check_label(y):
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ConfigError(f"labels must be 0 (same fabric) or 1 (different), got {np.unique(y)}")


def contrastive_loss(va, vb, y, m: float = 1.0) -> float:
    """(1 - y) d^2 + y max(m - d, 0)^2 for a single pair of embeddings."""
    _check_label(y)
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    d = float(np.linalg.norm(va - vb))
    return (1 - y) * d * d + y * max(m - d, 0.0) ** 2


def contrastive_loss_grad(va, vb, y, m: float = 1.0) -> np.ndarray:
    """Gradient of ``contrastive_loss`` with respect to ``va``."""
    _check_label(y)
    diff = np.asarray(va, dtype=np.float64) - np.asarray(vb, dtype=np.float64)
    if y == 0:
        return 2.0 * diff
    d = float(np.linalg.norm(diff))
    if d >= m or d == 0.0:
        return np.zeros_like(diff)
    return -2.0 * (m - d) * diff / d


def contrastive_loss_torch(va: torch.Tensor, vb: torch.Tensor, y: torch.Tensor, m: float) -> torch.Tensor:
    """Per-pair loss for (B, D) stacks; the caller reduces."""
    sq = ((va - vb) ** 2).sum(dim=-1)
    d = torch.sqrt(sq.clamp_min(1e-12))
    y = y.to(sq.dtype)
    return (1 - y) * sq + y * torch.clamp(m - d, min=0.0) ** 2


def pair_losses(model: SiameseNet, pairs: PairBatch, m: float, eval_batch: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(pairs), eval_batch):
                sl = slice(i, i + eval_batch)
                va, vb = model.embed_pair(as_tensor(pairs.a[sl]), as_tensor(pairs.b[sl]))
                out.append(contrastive_loss_torch(va.double(), vb.double(), torch.as_tensor(pairs.y[sl]), m).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.empty(0)


def validate(model: SiameseNet, val_pairs: PairBatch, cfg: TrainConfig) -> float:
    """Mean contrastive loss over a fixed validation pair set."""
    return float(np.mean(pair_losses(model, val_pairs, cfg.margin, cfg.eval_batch)))


def validation_pairs(pools, cfg: TrainConfig) -> PairBatch:
    # Frozen once per run so per-epoch numbers are comparable.
    return make_pair_batch(pools, cfg.p_same, cfg.val_pairs, seed=derive_seed(cfg.seed, "validation"), augment=cfg.augment)


# --- loop -----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    optimizer_lr: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    initial_val_loss: float = math.nan
    wall_clock: float = 0.0
    stopped_early: bool = False
    seed: int = 0

    @property
    def lrs(self) -> list[float]:
        return [r.lr for r in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.epochs]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.epochs:
                wr.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "initial_val_loss": self.initial_val_loss,
            "epochs_run": len(self.epochs),
            "stopped_early": self.stopped_early,
            "wall_clock_s": self.wall_clock,
            "seed": self.seed,
        }


def _check_pools(pools, split: str):
    if len(pools) < 2:
        raise ConfigError(f"{split} split needs at least two classes, got {len(pools)}")
    for c, arr in pools.items():
        if len(arr) < 2:
            raise ConfigError(f"{split} class {c} is empty or has a single instance")


def train_on_pools(
    train_pools: dict,
    val_pools: dict,
    model_spec: EncoderSpec = EncoderSpec(),
    cfg: TrainConfig = TrainConfig(),
    model: Optional[SiameseNet] = None,
    preprocess_hash: Optional[str] = None,
) -> tuple[SiameseNet, TrainReport]:
    """Optimize with SGD + momentum; return the best-validation model."""
    cfg.validate()
    _check_pools(train_pools, "train")
    _check_pools(val_pools, "validation")

    torch.manual_seed(derive_seed(cfg.seed, "weights") % 2**63)
    if model is None:
        model = SiameseNet(spec=model_spec)
    model.preprocess_hash = preprocess_hash
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum)
    val_pairs = validation_pairs(val_pools, cfg)
    batch_seed = derive_seed(cfg.seed, "batches")

    report = TrainReport(seed=cfg.seed)
    report.initial_val_loss = validate(model, val_pairs, cfg)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    t0 = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        lr = learning_rate(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train(not cfg.frozen)
        losses = []
        for b in range(cfg.batches_per_epoch):
            batch = make_pair_batch(
                train_pools, cfg.p_same, cfg.batch_size, seed=batch_seed, batch_index=epoch * cfg.batches_per_epoch + b, augment=cfg.augment
            )
            y = torch.as_tensor(batch.y)
            if cfg.frozen:
                with torch.no_grad():
                    va, vb = model.embed_pair(as_tensor(batch.a), as_tensor(batch.b))
                    loss = contrastive_loss_torch(va, vb, y, cfg.margin).mean()
            else:
                opt.zero_grad(set_to_none=True)
                va, vb = model.embed_pair(as_tensor(batch.a), as_tensor(batch.b))
                loss = contrastive_loss_torch(va, vb, y, cfg.margin).mean()
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b} (lr={lr:g})")
                loss.backward()
                opt.step()
            losses.append(loss.item())

        val = validate(model, val_pairs, cfg)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val, lr, opt.param_groups[0]["lr"]))
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, report.epochs[-1].train_loss, val)

        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                report.stopped_early = True
                break

    report.wall_clock = time.perf_counter() - t0
    model.load_state_dict(best_state)
    check_finite(model)
    model.eval()
    model.metadata = {
        "seed": cfg.seed,
        "epoch": report.best_epoch,
        "val_loss": report.best_val_loss,
        "train_config": asdict(cfg),
    }
    return model, report


def train(
    train_canvases: Sequence[CanvasImage],
    val_canvases: Sequence[CanvasImage],
    model_spec: EncoderSpec = EncoderSpec(),
    cfg: TrainConfig = TrainConfig(),
) -> tuple[SiameseNet, TrainReport]:
    """Build instance pools from preprocessed canvases, then train."""
    ids_train = {c.canvas_id for c in train_canvases}
    overlap = ids_train & {c.canvas_id for c in val_canvases}
    if overlap:
        raise ConfigError(f"canvases in both train and validation: {sorted(overlap)}")
    hashes = {c.preprocess_hash for c in list(train_canvases) + list(val_canvases)}
    train_pools = build_pools(train_canvases, cfg.M, cfg.seed)
    val_pools = build_pools(val_canvases, cfg.M, cfg.seed)
    return train_on_pools(
        train_pools,
        val_pools,
        model_spec,
        cfg,
        preprocess_hash=hashes.pop() if len(hashes) == 1 else None,
    )
