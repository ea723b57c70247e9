"""Monte-Carlo dropout over ADF passes and the data/model variance split.

Each pass draws one dropout mask from ``RngStream(seed, pass_index)``, runs
the moment-propagating forward pass, and yields logit moments ``(mu_n, v_n)``.
The decomposition is

    data  = mean_n v_n
    model = mean_n (mu_n - mean_n mu_n)^2
    total = data + model

Probabilities are ``softmax(mean_n mu_n)``; the probability-space variance
of a class comes from the softmax Jacobian at that mean (delta method).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .adf import InputNoise, adf_forward, adf_prefix, adf_suffix, lift
from .decoder import DecoderModel, DropoutMask, _xy, as_batch, softmax
from .io import dump_report, load_report
from .metrics import nll as nll_formula
from .rng import RngStream

DEFAULT_NOISE_GRID = (0.02, 0.05, 0.1, 0.2, 0.3)
FINE_NOISE_GRID = (0.002, 0.005, 0.01, 0.02, 0.03)

# probability-space variance can vanish (u = 0, no dropout); the Gaussian NLL
# is undefined there, so variances are floored before it is evaluated
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class UncertaintyConfig:
    """``phi`` is the DROP probability: ``phi=0.1`` keeps 90% of units."""

    n_passes: int = 200
    phi: float = 0.1
    input_noise: object = 0.1
    seed: int = 0
    covariance: str = "diagonal"
    batch_size: int = 512

    def __post_init__(self):
        if int(self.n_passes) < 1:
            raise ValueError(f"n_passes must be >= 1, got {self.n_passes}")
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi (drop probability) must lie in [0, 1), got {self.phi}")
        if self.covariance not in ("diagonal", "full"):
            raise ValueError(f"covariance must be 'diagonal' or 'full', got {self.covariance!r}")
        if not isinstance(self.input_noise, InputNoise):
            object.__setattr__(self, "input_noise", InputNoise(self.input_noise))

    @property
    def keep_prob(self) -> float:
        return 1.0 - self.phi

    @property
    def u(self):
        return self.input_noise.u

    def replace(self, **changes) -> "UncertaintyConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class UncertaintyReport:
    """Per-example, per-class logit moments; ``predictive_mean`` is in probability space."""

    predictive_mean: np.ndarray
    data_variance: np.ndarray
    model_variance: np.ndarray
    total_variance: np.ndarray
    n_passes: int
    phi: float = float("nan")
    u: object = float("nan")
    nll: float | None = None
    mean_logits: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        gap = np.abs(self.total_variance - (self.data_variance + self.model_variance))
        if gap.size and gap.max() > 1e-10 * max(1.0, float(np.abs(self.total_variance).max())):
            raise ValueError("total variance is not data + model variance")
        if np.any(self.data_variance < 0) or np.any(self.model_variance < 0):
            raise ValueError("negative variance in report")

    def probability_variance(self) -> np.ndarray:
        return delta_variance(self.predictive_mean, self.total_variance)

    def to_dict(self) -> dict:
        u = self.u
        return {
            "predictive_mean": self.predictive_mean,
            "data_variance": self.data_variance,
            "model_variance": self.model_variance,
            "total_variance": self.total_variance,
            "n_passes": int(self.n_passes),
            "phi": float(self.phi),
            "u": u if np.ndim(u) else float(u),
            "nll": None if self.nll is None else float(self.nll),
        }

    def dump(self, path=None) -> str:
        return dump_report(self.to_dict(), path)

    @classmethod
    def load(cls, path_or_text) -> "UncertaintyReport":
        d = load_report(path_or_text)
        arr = lambda k: np.asarray(d[k], dtype=np.float64)
        return cls(arr("predictive_mean"), arr("data_variance"), arr("model_variance"), arr("total_variance"),
                   int(d["n_passes"]), float(d["phi"]), d["u"], d["nll"])


def pass_mask(model: DecoderModel, cfg: UncertaintyConfig, index: int) -> DropoutMask:
    stream = RngStream(cfg.seed, index)
    return DropoutMask.sample(model.config, cfg.keep_prob, stream)


def mc_dropout_sample(model: DecoderModel, x, cfg: UncertaintyConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n_passes`` pairs of logit moments, each ``(batch, n_classes)``.

    A pass shares its mask across the batch; masks differ between passes.
    """
    if model.mode != "eval":
        raise ValueError("mc_dropout_sample requires an eval-mode model")
    n = int(cfg.n_passes)
    if n < 1:
        raise ValueError("n_passes must be >= 1")
    x = as_batch(model.config, x).transpose(0, 2, 1, 3)
    masks = [pass_mask(model, cfg, i) for i in range(n)]
    if cfg.covariance == "full":
        m0 = lift(x, cfg.input_noise)
        out = [adf_forward(model, m0, mk, covariance="full") for mk in masks]
        return [(o.mean, o.var) for o in out]
    chunks = [[] for _ in range(n)]
    for s in range(0, len(x), cfg.batch_size):
        prefix = adf_prefix(model, lift(x[s:s + cfg.batch_size], cfg.input_noise))
        for i, mk in enumerate(masks):
            o = adf_suffix(model, prefix, mk)
            chunks[i].append((o.mean, o.var))
    return [(np.concatenate([c[0] for c in ch]), np.concatenate([c[1] for c in ch])) for ch in chunks]


def decompose(samples, phi=float("nan"), u=float("nan")) -> UncertaintyReport:
    if len(samples) == 0:
        raise ValueError("decompose needs at least one sample")
    mu = np.stack([np.asarray(s[0], dtype=np.float64) for s in samples])
    v = np.stack([np.asarray(s[1], dtype=np.float64) for s in samples])
    mu_bar = mu.mean(axis=0)
    data = v.mean(axis=0)
    model = ((mu - mu_bar) ** 2).mean(axis=0)
    return UncertaintyReport(softmax(mu_bar), data, model, data + model, len(samples), phi, u,
                             mean_logits=mu_bar)


def delta_variance(probs, logit_var) -> np.ndarray:
    """Diagonal of ``J diag(v) J^T`` with ``J = diag(p) - p p^T`` (row-wise)."""
    p = np.asarray(probs, dtype=np.float64)
    v = np.asarray(logit_var, dtype=np.float64)
    jac = -p[..., :, None] * p[..., None, :]
    idx = np.arange(p.shape[-1])
    jac[..., idx, idx] += p
    return np.einsum("...kj,...j->...k", jac * jac, v)


def true_class_nll(report: UncertaintyReport, labels) -> np.ndarray:
    """Per-example Gaussian NLL of target 1 on the true-class probability."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))
    p = report.predictive_mean[rows, labels]
    v = np.maximum(report.probability_variance()[rows, labels], VAR_FLOOR)
    return nll_formula(1.0, p, v)


def estimate(model: DecoderModel, x, cfg: UncertaintyConfig, labels=None) -> UncertaintyReport:
    rep = decompose(mc_dropout_sample(model, x, cfg), cfg.phi, cfg.u)
    if labels is not None:
        rep.nll = float(true_class_nll(rep, labels).mean())
    return rep


def _grid_argmin(grid, scores):
    order = np.argsort(np.asarray(grid, dtype=np.float64), kind="stable")
    best = order[0]
    for i in order[1:]:
        if scores[i] < scores[best]:
            best = i
    return best


def gridsearch_input_noise(model: DecoderModel, val_set, grid=DEFAULT_NOISE_GRID,
                           cfg: UncertaintyConfig | None = None):
    """Return ``(u*, {u: mean NLL})``; ties go to the smaller ``u``."""
    grid = [float(u) for u in grid]
    if not grid:
        raise ValueError("input-noise grid is empty")
    if min(grid) < 0:
        raise ValueError("input-noise grid values must be non-negative")
    cfg = cfg or UncertaintyConfig()
    x, y = _xy(val_set)
    scores = [estimate(model, x, cfg.replace(input_noise=InputNoise(u)), y).nll for u in grid]
    return grid[_grid_argmin(grid, scores)], dict(zip(grid, scores))


def dropout_grid(n_points: int = 40) -> np.ndarray:
    if n_points < 2:
        raise ValueError(f"dropout grid needs n_points >= 2, got {n_points}")
    return np.geomspace(1e-3, 0.999, n_points)


def gridsearch_dropout(model: DecoderModel, val_set, n_points: int = 40, cfg: UncertaintyConfig | None = None):
    """Return ``(phi*, {phi: mean NLL})`` over a log-spaced grid on [1e-3, 0.999]."""
    grid = [float(p) for p in dropout_grid(n_points)]
    cfg = cfg or UncertaintyConfig()
    x, y = _xy(val_set)
    scores = [estimate(model, x, cfg.replace(phi=p), y).nll for p in grid]
    return grid[_grid_argmin(grid, scores)], dict(zip(grid, scores))
