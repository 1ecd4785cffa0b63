"""Desk-scale end-to-end experiment on synthetic fabrics.

One run renders every class in ``classes``, trains a single model on the
train/validation canvases and scores all held-out test canvases.  Class
grouping is then read off the clipped matrix.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import EncoderSpec, SiameseNet
from .preprocess import PreprocessConfig, preprocess_pipeline
from .presets import DEFAULT_SPLITS, DESK_CLASSES, HARD_PAIR, FabricClass, render_classes
from .similarity import SimilarityConfig, SimilarityMatrix, similarity_matrix
from .training import TrainConfig, TrainReport, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    size_cm: tuple[float, float] = (4.0, 4.0)
    splits: tuple[str, ...] = DEFAULT_SPLITS
    M: int = 20
    N: int = 200
    # A much larger step than the full-scale default: the desk budget allows
    # only a handful of short epochs.
    lr0: float = 0.01
    batch_size: int = 32
    batches_per_epoch: int = 8
    max_epochs: int = 14
    val_pairs: int = 128
    patience: int = 20
    encoder: EncoderSpec = field(default_factory=EncoderSpec)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            batch_size=self.batch_size,
            batches_per_epoch=self.batches_per_epoch,
            max_epochs=self.max_epochs,
            M=self.M,
            val_pairs=self.val_pairs,
            early_stop_patience=self.patience,
            seed=seed,
        )


@dataclass
class DeskResult:
    seed: int
    class_names: list[str]
    labels: np.ndarray
    matrix: SimilarityMatrix
    report: TrainReport
    model: SiameseNet
    timings: dict

    def submatrix(self, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Values and labels restricted to test canvases of the named classes."""
        wanted = {self.class_names.index(n) for n in names}
        keep = np.array([lab in wanted for lab in self.labels])
        return self.matrix.values[np.ix_(keep, keep)], self.labels[keep]


def run_desk(seed: int, cfg: DeskConfig = DeskConfig(), classes: Sequence[FabricClass] = DESK_CLASSES + HARD_PAIR) -> DeskResult:
    t0 = time.perf_counter()
    rendered = render_classes(classes, seed, cfg.splits, cfg.size_cm)
    pcfg = PreprocessConfig()
    by_split: dict[str, list] = {"train": [], "validation": [], "test": []}
    for rc in rendered:
        by_split[rc.split].append(preprocess_pipeline(rc.image, pcfg))
    t_data = time.perf_counter() - t0

    model, report = train(by_split["train"], by_split["validation"], cfg.encoder, cfg.train_config(seed))
    t_train = time.perf_counter() - t0 - t_data

    sm = similarity_matrix(model, by_split["test"], SimilarityConfig(N=cfg.N, seed=seed))
    t_sim = time.perf_counter() - t0 - t_data - t_train
    labels = np.array([c.class_label for c in by_split["test"]])
    timings = {"data_s": t_data, "train_s": t_train, "similarity_s": t_sim}
    log.info("desk seed %d: best epoch %d val %.4f, %s", seed, report.best_epoch, report.best_val_loss, timings)
    return DeskResult(seed, [c.name for c in classes], labels, sm, report, model, timings)


def class_grouping(values: np.ndarray, labels: np.ndarray, u: float) -> dict:
    """Per class: every distinct same-class pair below ``u`` and every cross pair at the clip."""
    n = len(labels)
    off = ~np.eye(n, dtype=bool)
    out = {}
    for c in np.unique(labels):
        mine = labels == c
        within = values[np.ix_(mine, mine)][off[np.ix_(mine, mine)]]
        cross = values[np.ix_(mine, ~mine)]
        out[int(c)] = bool(np.all(within < u) and np.all(cross >= u))
    return out


def within_cross_means(values: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(values[same & off].mean()), float(values[~same].mean())


def discrimination_outcome(result: DeskResult, names: Sequence[str], u: float = 0.03) -> dict:
    values, labels = result.submatrix(names)
    within, cross = within_cross_means(values, labels)
    grouped = class_grouping(values, labels, u)
    return {
        "seed": result.seed,
        "within_mean": within,
        "cross_mean": cross,
        "grouped": sum(grouped.values()),
        "classes": len(grouped),
        "per_class": {result.class_names[c]: ok for c, ok in grouped.items()},
    }


def hard_pair_outcome(result: DeskResult, names: Sequence[str], u: float = 0.03) -> dict:
    values, labels = result.submatrix(names)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within, cross = values[same & off], values[~same]
    return {
        "seed": result.seed,
        "within_max": float(within.max()),
        "cross_min": float(cross.min()),
        "passed": bool(np.all(within < u) and np.all(cross >= u)),
    }


def describe(cfg: DeskConfig) -> dict:
    d = asdict(cfg)
    d["encoder"] = cfg.encoder.to_dict()
    return d
