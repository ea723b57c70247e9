"""Variance-quality, calibration and performance metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .io import dump_report, load_report


@dataclass
class EvalBatch:
    probs: np.ndarray
    labels: np.ndarray
    variances: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.probs):
            raise ValueError(f"{len(self.probs)} probability rows but {len(self.labels)} labels")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("probability rows must be non-negative and sum to 1")
        k = self.probs.shape[1]
        if np.any(self.labels < 0) or np.any(self.labels >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        if self.variances is not None:
            self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


@dataclass
class MetricReport:
    nll: float
    brier: float
    ece: float
    accuracy: float
    roc_auc: float
    corruption_error: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path=None) -> str:
        return dump_report(self.to_dict(), path)

    @classmethod
    def load(cls, path_or_text) -> "MetricReport":
        return cls(**load_report(path_or_text))


def nll(y, ybar, v):
    """Gaussian negative log-likelihood ``0.5 log v + (y - ybar)^2 / (2 v)``."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(~(v > 0)):
        raise ValueError("nll needs a strictly positive variance")
    d = np.asarray(y, dtype=np.float64) - np.asarray(ybar, dtype=np.float64)
    out = 0.5 * np.log(v) + d * d / (2.0 * v)
    return float(out) if out.ndim == 0 else out


def brier(batch: EvalBatch) -> float:
    onehot = np.eye(batch.n_classes)[batch.labels]
    return float(((onehot - batch.probs) ** 2).mean(axis=1).mean())


def accuracy(batch: EvalBatch) -> float:
    return float((batch.probs.argmax(axis=1) == batch.labels).mean())


def _bin_stats(batch: EvalBatch, n_bins: int):
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    conf = batch.probs.max(axis=1)
    correct = (batch.probs.argmax(axis=1) == batch.labels).astype(np.float64)
    # equal-width bins, right-closed, confidence 0 lands in the first bin
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins).astype(np.float64)
    conf_sum = np.bincount(idx, conf, minlength=n_bins)
    acc_sum = np.bincount(idx, correct, minlength=n_bins)
    return count, conf_sum, acc_sum


def ece(batch: EvalBatch, n_bins: int = 15) -> float:
    count, conf_sum, acc_sum = _bin_stats(batch, n_bins)
    return float(np.abs(acc_sum - conf_sum).sum() / len(batch.labels))


def reliability_table(batch: EvalBatch, n_bins: int = 15) -> list[dict]:
    """Per-bin rows (edges, count, mean confidence, accuracy) for external plotting."""
    count, conf_sum, acc_sum = _bin_stats(batch, n_bins)
    rows = []
    for b in range(n_bins):
        n = count[b]
        rows.append({"lower": b / n_bins, "upper": (b + 1) / n_bins, "count": int(n),
                     "confidence": conf_sum[b] / n if n else 0.0, "accuracy": acc_sum[b] / n if n else 0.0})
    return rows


def binary_auc(scores, positive) -> float:
    """Rank statistic; tied scores share the midpoint rank (half credit)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(batch: EvalBatch) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``."""
    present = np.unique(batch.labels)
    if len(present) < 2:
        raise ValueError("roc_auc needs at least two classes present")
    return float(np.mean([binary_auc(batch.probs[:, k], batch.labels == k) for k in present]))


def corruption_error(model, corrupted_sets: dict) -> float:
    """Mean of ``1 - accuracy`` over every corrupted set (types x severities).

    ``model`` is a DecoderModel or a callable returning class predictions.
    """
    if not corrupted_sets:
        raise ValueError("corruption_error needs at least one corrupted set")
    errs = []
    for key in corrupted_sets:
        ds = corrupted_sets[key]
        if len(ds.labels) == 0:
            raise ValueError(f"corrupted set {key!r} is empty")
        errs.append(1.0 - float(np.mean(_predict(model, ds.segments) == np.asarray(ds.labels))))
    return float(np.mean(errs))


def _predict(model, x):
    if callable(model):
        return np.asarray(model(x))
    from .decoder import predict_logits

    return predict_logits(model, x).argmax(axis=1)


def metric_report(batch: EvalBatch, n_bins: int = 15, corruption: float | None = None) -> MetricReport:
    """All metrics; NLL needs ``batch.variances`` (true-class probability variance)."""
    if batch.variances is None:
        raise ValueError("metric_report needs per-example variances for the NLL")
    rows = np.arange(len(batch.labels))
    p_true = batch.probs[rows, batch.labels]
    return MetricReport(float(np.mean(nll(1.0, p_true, batch.variances))), brier(batch), ece(batch, n_bins),
                        accuracy(batch), roc_auc(batch), corruption)
