"""From Siamese outputs to a symmetric fabric-similarity score.

For canvases A and B we draw three independent crop sets (X_A, X'_A from A;
X_B from B, plus X'_B for the B baseline), push index-aligned pairs through
the trained network and histogram the resulting distances.  The score is the
larger of the two Jensen-Shannon divergences between each canvas's
self-comparison histogram and the cross-comparison histogram, clipped at
``u``.  Small values suggest the same type of fabric.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .canvas import CanvasImage
from .dataset import INSTANCE_SIDE, derive_seed
from .errors import ConfigError, DataError, DivergenceUndefinedError, ShapeError, SizeError
from .model import SiameseNet, embed

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
VARIANTS = ("jsd", "literal")


@dataclass(frozen=True)
class SimilarityConfig:
    N: int = 1000
    K: int = 50
    t: float = 2.5
    u: float = 0.03
    seed: int = 0
    # "literal" reproduces the printed algorithm, whose cross term collapses
    # to KL(q_AB || q_AB) = 0.
    variant: str = "jsd"

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if not self.t > 0 or not self.u > 0:
            raise ConfigError("t and u must be > 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")

    def warnings(self) -> list[str]:
        out = []
        if self.N < self.K:
            out.append(f"N={self.N} is below the bin count K={self.K}; histograms will be very sparse")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["log_base"] = "e"
        return d


@dataclass
class OutcomePDF:
    probs: np.ndarray
    t: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)

    @property
    def K(self) -> int:
        return len(self.probs)

    @property
    def bin_width(self) -> float:
        return self.t / self.K


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, OutcomePDF) else np.asarray(p, dtype=np.float64)


def bin_index(o, K: int, t: float) -> np.ndarray:
    """Right-closed bins ((k-1) t/K, k t/K]; zero goes to the first bin, >= t to the last."""
    o = np.asarray(o, dtype=np.float64)
    idx = np.ceil(o * K / t).astype(np.int64) - 1
    return np.clip(idx, 0, K - 1)


def estimate_pdf(o, K: int = 50, t: float = 2.5) -> OutcomePDF:
    o = np.asarray(o, dtype=np.float64).ravel()
    if o.size == 0:
        raise DataError("cannot estimate a PDF from an empty outcome vector")
    counts = np.bincount(bin_index(o, K, t), minlength=K)
    return OutcomePDF(counts / o.size, t)


def _same_support(p, q):
    if isinstance(p, OutcomePDF) and isinstance(q, OutcomePDF) and p.t != q.t:
        raise ShapeError(f"PDF supports differ: (0, {p.t}) vs (0, {q.t})")
    pp, qq = _probs(p), _probs(q)
    if pp.shape != qq.shape:
        raise ShapeError(f"PDFs have different bin counts: {pp.shape} vs {qq.shape}")
    return pp, qq


def kl_divergence(p, q) -> float:
    """Natural-log KL divergence with 0 ln(0/x) = 0."""
    pp, qq = _same_support(p, q)
    nz = pp > 0
    if np.any(qq[nz] <= 0):
        raise DivergenceUndefinedError("KL(p||q) is infinite: q has empty bins where p has mass")
    return float(np.sum(pp[nz] * np.log(pp[nz] / qq[nz])))


def jsd(p, q) -> float:
    pp, qq = _same_support(p, q)
    m = 0.5 * (pp + qq)
    val = 0.5 * kl_divergence(pp, m) + 0.5 * kl_divergence(qq, m)
    return min(max(val, 0.0), LN2)


# --- outcomes -------------------------------------------------------------


def random_crops(img: CanvasImage, n: int, seed: int) -> np.ndarray:
    s = INSTANCE_SIDE
    h, w = img.shape
    if h < s or w < s:
        raise SizeError(f"canvas {img.canvas_id!r} ({h}x{w}) is smaller than a {s}px crop")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - s + 1, size=n)
    cols = rng.integers(0, w - s + 1, size=n)
    out = np.empty((n, s, s), dtype=np.float32)
    for i, (r, c) in enumerate(zip(rows, cols)):
        out[i] = img.pixels[r : r + s, c : c + s]
    return out


def _check_compat(model: SiameseNet, *imgs: CanvasImage):
    want = getattr(model, "preprocess_hash", None)
    if want is None:
        return
    for img in imgs:
        if img.preprocess_hash is not None and img.preprocess_hash != want:
            warnings.warn(
                f"canvas {img.canvas_id!r} was preprocessed with config {img.preprocess_hash}, "
                f"checkpoint expects {want}",
                stacklevel=3,
            )


def outcome_vector(model: SiameseNet, img_a: CanvasImage, img_b: CanvasImage, N: int, seed: int, seed_b: Optional[int] = None) -> np.ndarray:
    """Distances for N index-aligned random crop pairs.

    ``seed`` drives the crops of ``img_a``; ``seed_b`` those of ``img_b``
    and defaults to ``seed``.
    """
    _check_compat(model, img_a, img_b)
    if N == 0:
        return np.empty(0)
    xa = random_crops(img_a, N, seed)
    xb = random_crops(img_b, N, seed if seed_b is None else seed_b)
    ea, eb = embed(model, xa), embed(model, xb)
    return np.sqrt(np.sum((ea - eb) ** 2, axis=1))


def crop_seed(global_seed: int, canvas_id: str, role: str) -> int:
    """Crop seed keyed by canvas, never by argument position."""
    return derive_seed(global_seed, "crops", canvas_id, role)


@dataclass
class PairScore:
    canvas_a: str
    canvas_b: str
    j_ab: float
    j_ba: float
    s_raw: float
    s: float

    def is_match(self, u: float) -> bool:
        return self.s < u


class _EmbeddingCache:
    """Per-canvas crop embeddings; a canvas's crops depend only on its id."""

    def __init__(self, model: SiameseNet, cfg: SimilarityConfig):
        self.model = model
        self.cfg = cfg
        self._store: dict = {}

    def get(self, img: CanvasImage, role: str) -> np.ndarray:
        key = (img.canvas_id, role)
        if key not in self._store:
            crops = random_crops(img, self.cfg.N, crop_seed(self.cfg.seed, img.canvas_id, role))
            self._store[key] = embed(self.model, crops)
        return self._store[key]


def _dist(ea, eb):
    return np.sqrt(np.sum((ea - eb) ** 2, axis=1))


def _indicator_from_outcomes(o_ab, o_aa, o_bb, cfg: SimilarityConfig) -> tuple[float, float, float]:
    q_ab = estimate_pdf(o_ab, cfg.K, cfg.t)
    q_aa = estimate_pdf(o_aa, cfg.K, cfg.t)
    q_bb = estimate_pdf(o_bb, cfg.K, cfg.t)
    if cfg.variant == "jsd":
        j_ab = jsd(q_aa, q_ab)
        j_ba = jsd(q_bb, q_ab)
    else:
        l_ab = kl_divergence(q_ab, q_ab)
        m_a = OutcomePDF(0.5 * (q_aa.probs + q_ab.probs), cfg.t)
        m_b = OutcomePDF(0.5 * (q_bb.probs + q_ab.probs), cfg.t)
        j_ab = 0.5 * (kl_divergence(q_aa, m_a) + l_ab)
        j_ba = 0.5 * (kl_divergence(q_bb, m_b) + l_ab)
    s_raw = max(j_ab, j_ba)
    return j_ab, j_ba, s_raw


def _score(cache: _EmbeddingCache, img_a: CanvasImage, img_b: CanvasImage) -> PairScore:
    cfg = cache.cfg
    ea, ea2 = cache.get(img_a, "X"), cache.get(img_a, "X'")
    if img_a.canvas_id == img_b.canvas_id:
        # Self-comparison: a third independent crop set stands in for B, so
        # all three outcome vectors compare disjoint draws.
        eb = cache.get(img_a, "X''")
        o_ab, o_aa, o_bb = _dist(ea, eb), _dist(ea, ea2), _dist(eb, ea2)
    else:
        eb, eb2 = cache.get(img_b, "X"), cache.get(img_b, "X'")
        o_ab, o_aa, o_bb = _dist(ea, eb), _dist(ea, ea2), _dist(eb, eb2)
    j_ab, j_ba, s_raw = _indicator_from_outcomes(o_ab, o_aa, o_bb, cfg)
    return PairScore(img_a.canvas_id, img_b.canvas_id, j_ab, j_ba, s_raw, min(s_raw, cfg.u))


def symmetric_indicator(model: SiameseNet, img_a: CanvasImage, img_b: CanvasImage, cfg: SimilarityConfig = SimilarityConfig()) -> PairScore:
    cfg.validate()
    for msg in cfg.warnings():
        log.warning(msg)
    _check_compat(model, img_a, img_b)
    return _score(_EmbeddingCache(model, cfg), img_a, img_b)


@dataclass
class SimilarityMatrix:
    canvas_ids: list[str]
    values: np.ndarray
    u: float
    scores: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def is_symmetric(self) -> bool:
        v = self.values
        return bool(np.array_equal(v, v.T, equal_nan=True))

    def pair_rows(self):
        """(i, j, score) for i <= j in canvas order, skipping failures."""
        n = len(self.canvas_ids)
        for i in range(n):
            for j in range(i, n):
                sc = self.scores.get((i, j))
                if sc is not None:
                    yield i, j, sc


def similarity_matrix(model: SiameseNet, canvases: Sequence[CanvasImage], cfg: SimilarityConfig = SimilarityConfig()) -> SimilarityMatrix:
    """Clipped symmetric indicator for every unordered pair plus self-pairs.

    A failing pair leaves NaN in the matrix and its error in ``failures``.
    """
    cfg.validate()
    if len(canvases) < 2:
        raise ConfigError("a similarity matrix needs at least two canvases")
    ids = [c.canvas_id for c in canvases]
    if len(set(ids)) != len(ids):
        raise ConfigError("canvas ids must be unique")
    for msg in cfg.warnings():
        log.warning(msg)
    _check_compat(model, *canvases)
    cache = _EmbeddingCache(model, cfg)
    n = len(canvases)
    values = np.full((n, n), np.nan)
    scores, failures = {}, {}
    for i in range(n):
        for j in range(i, n):
            try:
                sc = _score(cache, canvases[i], canvases[j])
            except (DataError, ArithmeticError) as exc:
                failures[(i, j)] = str(exc)
                log.error("pair (%s, %s) failed: %s", ids[i], ids[j], exc)
                continue
            scores[(i, j)] = sc
            values[i, j] = values[j, i] = sc.s
    return SimilarityMatrix(ids, values, cfg.u, scores, failures)
