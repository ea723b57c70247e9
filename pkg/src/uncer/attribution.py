"""Occlusion attribution: how prediction and uncertainty react to a missing channel."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .decoder import DecoderModel, _xy
from .rng import RngStream
from .uncertainty import UncertaintyConfig, estimate

TOPOGRAPHY_HEADER = ("channel", "x", "y", "influence_pred", "influence_unc")


@dataclass
class ChannelInfluence:
    delta_pred: np.ndarray
    delta_unc: np.ndarray
    runs: int

    def __post_init__(self):
        self.delta_pred = np.asarray(self.delta_pred, dtype=np.float64)
        self.delta_unc = np.asarray(self.delta_unc, dtype=np.float64)
        if self.delta_pred.shape != self.delta_unc.shape or self.delta_pred.ndim != 1:
            raise ValueError("influence vectors must be 1-d and of equal length")
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")

    @property
    def n_channels(self) -> int:
        return len(self.delta_pred)


def occlude(x, channel: int) -> np.ndarray:
    """Copy of ``x`` with one channel (axis -2) set to zero."""
    x = np.array(x, dtype=np.float64)
    n = x.shape[-2]
    if not 0 <= channel < n:
        raise IndexError(f"channel {channel} outside [0, {n})")
    x[..., channel, :] = 0.0
    return x


def run_seed(seed: int, run: int) -> int:
    return RngStream(seed).child("attribution-run", run).stream_id


def _true_class(rep, labels):
    rows = np.arange(len(labels))
    return rep.predictive_mean[rows, labels], rep.total_variance[rows, labels]


def channel_influence(model: DecoderModel, dataset, cfg: UncertaintyConfig | None = None,
                      runs: int = 20) -> ChannelInfluence:
    """Average over examples and runs of the drop in true-class probability and
    the rise in true-class total (logit) variance when each channel is zeroed."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    cfg = cfg or UncertaintyConfig()
    x, y = _xy(dataset)
    y = np.asarray(y, dtype=np.int64)
    n_ch = x.shape[1]
    d_pred = np.zeros(n_ch)
    d_unc = np.zeros(n_ch)
    for r in range(runs):
        rc = cfg.replace(seed=run_seed(cfg.seed, r))
        p0, v0 = _true_class(estimate(model, x, rc), y)
        for c in range(n_ch):
            if not np.any(x[:, c, :]):
                continue
            p1, v1 = _true_class(estimate(model, occlude(x, c), rc), y)
            d_pred[c] += np.mean(p0 - p1)
            d_unc[c] += np.mean(v1 - v0)
    return ChannelInfluence(d_pred / runs, d_unc / runs, runs)


# ---------------------------------------------------------------------------
# layouts and export
# ---------------------------------------------------------------------------


def read_layout(path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["name", "x", "y"]:
        raise ValueError(f"{path}: layout header must be 'name,x,y'")
    return [(r[0].strip(), float(r[1]), float(r[2])) for r in rows[1:] if r]


def bci_iv_2a_layout() -> list[tuple[str, float, float]]:
    """22-electrode motor-imagery montage (schematic 2-d positions)."""
    with resources.as_file(resources.files("uncer") / "data" / "bci_iv_2a_montage.csv") as p:
        return read_layout(p)


def circle_layout(n_channels: int) -> list[tuple[str, float, float]]:
    ang = 2 * np.pi * np.arange(n_channels) / n_channels
    return [(f"ch{i}", float(np.cos(a)), float(np.sin(a))) for i, a in enumerate(ang)]


def export_topography(infl: ChannelInfluence, layout, path) -> None:
    """One row per channel, in channel order, with exact float text."""
    layout = list(layout)
    if len(layout) < infl.n_channels:
        raise ValueError(f"layout has {len(layout)} entries, influence covers {infl.n_channels} channels")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TOPOGRAPHY_HEADER)
        for c in range(infl.n_channels):
            name, x, y = layout[c]
            w.writerow([name, repr(float(x)), repr(float(y)), repr(float(infl.delta_pred[c])),
                        repr(float(infl.delta_unc[c]))])


def read_topography(path) -> tuple[list[tuple[str, float, float]], ChannelInfluence]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != ",".join(TOPOGRAPHY_HEADER):
        raise ValueError(f"{path}: unexpected topography header")
    rows = list(csv.reader(text[1:]))
    layout = [(r[0], float(r[1]), float(r[2])) for r in rows]
    return layout, ChannelInfluence([float(r[3]) for r in rows], [float(r[4]) for r in rows], 1)
