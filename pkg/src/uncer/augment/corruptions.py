"""Signal-domain corruption operators with five severity levels.

Every operator maps an array whose last two axes are (channels, samples) to
an array of the same shape. Randomness comes only from the stream argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d, uniform_filter1d

from ..rng import RngStream

CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise", "motion_blur",
               "zoom_blur", "intensity", "contrast", "elastic")

GAUSS_SIGMA = (0.1, 0.2, 0.3, 0.45, 0.6)
SHOT_RATE = (60.0, 25.0, 12.0, 5.0, 3.0)
IMPULSE_DENSITY = (0.005, 0.01, 0.02, 0.04, 0.07)
IMPULSE_AMPLITUDE = (2.0, 3.0, 4.0, 5.0, 6.0)
BLUR_LENGTH = (3, 5, 9, 13, 17)
CONTRAST_FACTOR = (0.8, 0.65, 0.5, 0.35, 0.2)
ELASTIC_SHIFT = (0.01, 0.02, 0.035, 0.05, 0.07)  # peak displacement as a fraction of the window


@dataclass(frozen=True)
class CorruptionOp:
    kind: str
    severity: int = 1

    def __post_init__(self):
        if self.kind not in CORRUPTIONS and self.kind != "identity":
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if int(self.severity) != self.severity or not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be an integer in [1, 5], got {self.severity}")


def all_ops(severity: int = 3) -> list[CorruptionOp]:
    return [CorruptionOp(k, severity) for k in CORRUPTIONS]


def gain(severity: int, sign: float = 1.0) -> float:
    return 1.0 + sign * 0.1 * severity


def _resample(x, src):
    """Linear interpolation of every row at fractional sample positions ``src``."""
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    src = np.clip(src, 0.0, n - 1)
    lo = np.minimum(np.floor(src).astype(np.int64), n - 2)
    frac = src - lo
    return x[..., lo] * (1.0 - frac) + x[..., lo + 1] * frac


def _zoom(x, factor):
    # time-rescaled copy about the window centre
    n = x.shape[-1]
    t = np.arange(n, dtype=np.float64)
    c = (n - 1) / 2.0
    return _resample(x, c + (t - c) / factor)


def apply_corruption(op: CorruptionOp, x, stream: RngStream) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"corruption input must have (channels, samples) axes, got shape {x.shape}")
    s = op.severity - 1
    kind = op.kind
    if kind == "identity":
        return x.copy()
    if kind == "gaussian_noise":
        return x + stream.normal(x.shape, 0.0, GAUSS_SIGMA[s])
    if kind == "shot_noise":
        lam = SHOT_RATE[s]
        return np.sign(x) * stream.poisson(np.abs(x) * lam) / lam
    if kind == "impulse_noise":
        hit = stream.uniform(x.shape) < IMPULSE_DENSITY[s]
        sign = np.where(stream.uniform(x.shape) < 0.5, -1.0, 1.0)
        return x + hit * sign * IMPULSE_AMPLITUDE[s]
    if kind == "motion_blur":
        return uniform_filter1d(x, BLUR_LENGTH[s], axis=-1, mode="nearest")
    if kind == "zoom_blur":
        factors = np.linspace(1.0, 1.0 + 0.04 * op.severity, op.severity + 1)
        return np.mean([_zoom(x, f) for f in factors], axis=0)
    if kind == "intensity":
        sign = 1.0 if stream.uniform(()) < 0.5 else -1.0
        return gain(op.severity, sign) * x
    if kind == "contrast":
        mu = x.mean(axis=-1, keepdims=True)
        return mu + CONTRAST_FACTOR[s] * (x - mu)
    if kind == "elastic":
        n = x.shape[-1]
        field = gaussian_filter1d(stream.normal(n), sigma=max(n / 16.0, 1.0), mode="wrap")
        peak = np.abs(field).max()
        disp = field / peak * ELASTIC_SHIFT[s] * n if peak > 0 else field
        return _resample(x, np.arange(n, dtype=np.float64) + disp)
    raise ValueError(f"unknown corruption kind {kind!r}")


def corrupt_set(dataset, op: CorruptionOp, stream: RngStream):
    """Corrupted copy of a SegmentSet; labels are untouched."""
    return dataset.with_segments(apply_corruption(op, dataset.segments, stream))
