"""Procedural plain-weave textures that look roughly like canvas X-rays.

Each axis carries a periodic thread profile (a raised-cosine bump whose
width is a fraction of the thread pitch).  At every crossing the thread on
top alternates in a checkerboard, which is what makes the weave *plain*.
Warp threads run vertically, so their density is measured along the column
axis; weft threads run horizontally and repeat along the row axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .canvas import CanvasImage
from .errors import ConfigError, NoPeakError, SizeError

RESOLUTION = 200.0  # px/cm, matches the preprocessing target
MIN_SIDE_CM = 2.0
DENSITY_RANGE = (5.0, 25.0)

# Visibility of a thread where it passes under the crossing one.
UNDER_WEIGHT = 0.4
# Band-limit of the density drift field, cycles/cm.
DRIFT_CUTOFF = 0.2
_DRIFT_TERMS = 8


@dataclass(frozen=True)
class WeaveSpec:
    warp_density: float
    weft_density: float
    warp_width: float = 0.6
    weft_width: float = 0.6
    tension_ratio: float = 1.0
    density_jitter: float = 0.0
    noise_level: float = 0.0
    rotation_deg: float = 0.0
    seed: int = 0
    blotches: int = 0

    def validate(self) -> None:
        lo, hi = DENSITY_RANGE
        for name in ("warp_density", "weft_density"):
            v = getattr(self, name)
            if not (lo <= v <= hi):
                raise ConfigError(f"{name}={v} outside [{lo}, {hi}] threads/cm")
        for name in ("warp_width", "weft_width"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ConfigError(f"{name}={v} must lie in (0, 1]")
        for name in ("tension_ratio", "density_jitter", "noise_level"):
            v = getattr(self, name)
            if not (v >= 0.0 and math.isfinite(v)):
                raise ConfigError(f"{name}={v} must be finite and >= 0")
        if self.blotches < 0:
            raise ConfigError("blotches must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class _Drift:
    amp: np.ndarray  # (terms,)
    freq: np.ndarray  # (terms, 2) cycles/cm in (u, v)
    phase: np.ndarray  # (terms,)

    def __call__(self, u, v):
        out = np.zeros(np.broadcast(u, v).shape)
        for a, (fu, fv), p in zip(self.amp, self.freq, self.phase):
            out += a * np.sin(2 * np.pi * (fu * u + fv * v) + p)
        return out

    def du(self, u, v):
        """Partial derivative along the first argument (relative density change)."""
        out = np.zeros(np.broadcast(u, v).shape)
        for a, (fu, fv), p in zip(self.amp, self.freq, self.phase):
            out += a * 2 * np.pi * fu * np.cos(2 * np.pi * (fu * u + fv * v) + p)
        return out


def _make_drift(rng: np.random.Generator, jitter: float) -> _Drift:
    # Random low-frequency sinusoids; the amplitude is chosen so that the
    # derivative along the thread-repeat axis (the relative density change)
    # has a std of about ``jitter``.
    radius = rng.uniform(0.25 * DRIFT_CUTOFF, DRIFT_CUTOFF, _DRIFT_TERMS)
    angle = rng.uniform(0, 2 * np.pi, _DRIFT_TERMS)
    freq = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    amp = jitter * math.sqrt(2.0 / _DRIFT_TERMS) * math.sqrt(2.0) / (2 * np.pi * radius)
    phase = rng.uniform(0, 2 * np.pi, _DRIFT_TERMS)
    return _Drift(amp, freq, phase)


@dataclass(frozen=True)
class _WeaveParams:
    warp_phase0: float
    weft_phase0: float
    warp_drift: _Drift
    weft_drift: _Drift
    # Subtracted from the drift slope so the canvas-average density is nominal.
    warp_slope: float = 0.0
    weft_slope: float = 0.0


def _params(spec: WeaveSpec) -> tuple[_WeaveParams, np.random.Generator]:
    rng = np.random.default_rng(spec.seed)
    p = _WeaveParams(
        warp_phase0=rng.uniform(0, 1),
        weft_phase0=rng.uniform(0, 1),
        warp_drift=_make_drift(rng, spec.density_jitter),
        weft_drift=_make_drift(rng, spec.density_jitter),
    )
    return p, rng


def _center_drift(spec: WeaveSpec, params: _WeaveParams, height_cm: float, width_cm: float) -> _WeaveParams:
    # The drift band sits below 0.2 cycles/cm, so over a few centimetres it
    # mostly acts as a constant density offset.  Removing the mean slope keeps
    # the within-canvas variation while pinning the average to the nominal
    # density.
    theta = math.radians(spec.rotation_deg)
    y, x = np.mgrid[0:64, 0:64]
    x = (x + 0.5) * width_cm / 64
    y = (y + 0.5) * height_cm / 64
    u = x * math.cos(theta) + y * math.sin(theta)
    v = -x * math.sin(theta) + y * math.cos(theta)
    # Centre-weighted, matching the taper used by ``density_spectrum``.
    taper = np.sin(np.pi * (np.arange(64) + 0.5) / 64) ** 2
    weight = np.outer(taper, taper) ** 2
    weight /= weight.sum()
    return replace(
        params,
        warp_slope=float((params.warp_drift.du(u, v) * weight).sum()),
        weft_slope=float((params.weft_drift.du(v, u) * weight).sum()),
    )


def _bump(phase, width):
    offset = phase - np.floor(phase + 0.5)
    return np.where(np.abs(offset) < width / 2, 0.5 * (1 + np.cos(2 * np.pi * offset / width)), 0.0)


def weave_field(spec: WeaveSpec, x_cm, y_cm) -> np.ndarray:
    """Noise-free weave intensity at arbitrary coordinates (cm).

    ``x_cm`` runs along columns, ``y_cm`` along rows.  The result lies in
    [0.15, 0.85]; ``generate_weave`` adds noise on top of it.  Density drift
    is left uncentred here since no canvas extent is known.
    """
    spec.validate()
    params, _ = _params(spec)
    return _field(spec, params, np.asarray(x_cm, float), np.asarray(y_cm, float))


def _field(spec: WeaveSpec, params: _WeaveParams, x, y):
    theta = math.radians(spec.rotation_deg)
    u = x * math.cos(theta) + y * math.sin(theta)
    v = -x * math.sin(theta) + y * math.cos(theta)

    warp_phase = spec.warp_density * (u + params.warp_drift(u, v) - params.warp_slope * u) + params.warp_phase0
    weft_phase = spec.weft_density * (v + params.weft_drift(v, u) - params.weft_slope * v) + params.weft_phase0

    bw = _bump(warp_phase, spec.warp_width)
    bt = _bump(weft_phase, spec.weft_width)
    t = spec.tension_ratio
    scale = max(1.0, t)
    a = bw / scale
    b = bt * t / scale

    warp_on_top = (np.floor(warp_phase + 0.5) + np.floor(weft_phase + 0.5)) % 2 == 0
    inten = np.where(warp_on_top, a + UNDER_WEIGHT * b * (1 - bw), b + UNDER_WEIGHT * a * (1 - bt))
    return 0.15 + 0.7 * inten


def generate_weave(
    spec: WeaveSpec,
    height_cm: float,
    width_cm: float,
    canvas_id: str = "",
    class_label: Optional[int] = None,
) -> CanvasImage:
    """Render a plain-weave canvas at 200 px/cm.

    Deterministic given ``spec`` (the seed is part of it).
    """
    spec.validate()
    if height_cm < MIN_SIDE_CM or width_cm < MIN_SIDE_CM:
        raise SizeError(f"canvas must be at least {MIN_SIDE_CM} cm per side, got {height_cm}x{width_cm}")
    params, rng = _params(spec)
    h = int(round(height_cm * RESOLUTION))
    w = int(round(width_cm * RESOLUTION))
    y = (np.arange(h)[:, None] + 0.5) / RESOLUTION
    x = (np.arange(w)[None, :] + 0.5) / RESOLUTION
    if spec.density_jitter > 0:
        params = _center_drift(spec, params, height_cm, width_cm)
    img = _field(spec, params, x, y)

    if spec.blotches:
        for _ in range(spec.blotches):
            cy, cx = rng.uniform(0, height_cm), rng.uniform(0, width_cm)
            sigma = rng.uniform(0.1, 0.4)
            depth = rng.uniform(0.3, 0.7)
            img = img * (1 - depth * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma**2)))
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, img.shape)
    return CanvasImage(np.clip(img, 0.0, 1.0), RESOLUTION, canvas_id=canvas_id, class_label=class_label)


def _axis_peak(power: np.ndarray, along: np.ndarray, across: np.ndarray, band, cone_deg=10.0, refine_radius=1.0):
    """Strongest frequency near one axis of a 2-D power spectrum.

    ``power`` is indexed [across, along]; the search is restricted to a cone
    of half-angle ``cone_deg`` around the ``along`` axis.
    """
    lo, hi = band
    A, C = np.meshgrid(along, across)
    mask = (A >= lo) & (A <= hi) & (np.abs(C) <= np.tan(np.radians(cone_deg)) * A)
    vals = np.where(mask, power, -np.inf)
    idx = np.unravel_index(np.argmax(vals), vals.shape)
    peak = power[idx]
    floor = np.median(power[mask])
    # Slow density drift smears the line over neighbouring bins; the
    # power-weighted centroid of that neighbourhood tracks the mean density.
    radial = np.hypot(A, C)
    near = mask & (np.hypot(A - A[idx], C - C[idx]) <= refine_radius)
    centroid = float((power[near] * radial[near]).sum() / power[near].sum())
    return centroid, float(peak), float(floor)


PEAK_TO_FLOOR = 25.0


def density_spectrum(img: CanvasImage, band=(4.0, 30.0)) -> tuple[float, float]:
    """Dominant thread frequency per axis, in threads/cm.

    Returns ``(warp_peak, weft_peak)``: warp along columns, weft along rows.
    Raises NoPeakError when either axis has nothing above the noise floor.
    """
    h, w = img.shape
    if min(h, w) < img.resolution:
        raise SizeError("spectrum needs at least 1 cm per side")
    if np.ptp(img.pixels) < 1e-9:
        raise NoPeakError("flat image has no periodic component")
    p = img.pixels - img.pixels.mean()
    win = np.outer(np.hanning(h), np.hanning(w))
    power = np.abs(np.fft.fft2(p * win)) ** 2
    fy = np.fft.fftfreq(h, d=1.0 / img.resolution)
    fx = np.fft.fftfreq(w, d=1.0 / img.resolution)

    warp, pk_w, fl_w = _axis_peak(power, fx, fy, band)
    weft, pk_t, fl_t = _axis_peak(power.T, fy, fx, band)
    for name, pk, fl in (("warp", pk_w, fl_w), ("weft", pk_t, fl_t)):
        if not pk > 0 or pk < PEAK_TO_FLOOR * fl:
            raise NoPeakError(f"no {name} peak above the noise floor (peak={pk:.3g}, floor={fl:.3g})")
    return warp, weft


def bin_width(img: CanvasImage) -> tuple[float, float]:
    """FFT frequency resolution (cycles/cm) along (columns, rows)."""
    h, w = img.shape
    return img.resolution / w, img.resolution / h
