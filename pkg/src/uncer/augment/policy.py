"""Operation split, augmentation chains, mixing and the JS consistency term."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import softmax, xlogy

from .. import tensor as T
from ..rng import RngStream
from ..tensor import ShapeError, Tensor
from .corruptions import CorruptionOp, apply_corruption


@dataclass(frozen=True)
class AugmentConfig:
    width: int = 3
    depth: int = 3
    inner_steps: int = 1
    inner_lr: float = 1e-3
    lam: float = 15.0
    seen_count: int = 6
    meta_lr: float = 1e-3
    hidden_dim: int = 16
    severity: int = 3

    def __post_init__(self):
        for name in ("width", "depth", "inner_steps", "hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.seen_count < 1:
            raise ValueError(f"seen_count must be >= 1, got {self.seen_count}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must lie in [1, 5], got {self.severity}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MixDecision:
    w: np.ndarray
    m: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.m = float(self.m)
        if np.any(self.w < 0) or abs(self.w.sum() - 1.0) > 1e-9:
            raise ValueError("chain weights must be non-negative and sum to 1")
        if not 0.0 <= self.m <= 1.0:
            raise ValueError(f"m must lie in [0, 1], got {self.m}")


def split_ops(ops, seen_count: int, stream: RngStream):
    """Random disjoint ``(seen, unseen)`` partition of ``ops``."""
    ops = list(ops)
    if not 0 < seen_count < len(ops):
        raise ValueError(f"seen_count must lie in (0, {len(ops)}), got {seen_count}")
    order = stream.permutation(len(ops))
    return [ops[i] for i in sorted(order[:seen_count])], [ops[i] for i in sorted(order[seen_count:])]


def build_chain(seen, depth: int, stream: RngStream) -> list[CorruptionOp]:
    """Chain of 1..depth operations drawn from ``seen`` with replacement."""
    seen = list(seen)
    if not seen:
        raise ValueError("cannot build a chain from an empty operation set")
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    length = int(stream.integers(1, depth + 1))
    return [seen[int(i)] for i in stream.integers(0, len(seen), length)]


def apply_chain(chain, x, stream: RngStream) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64)
    for j, op in enumerate(chain):
        out = apply_corruption(op, out, stream.child(j))
    return out


def chain_outputs(ops, x, depth: int, width: int, stream: RngStream) -> list[np.ndarray]:
    return [apply_chain(build_chain(ops, depth, stream.child("chain", i)), x, stream.child("apply", i))
            for i in range(width)]


def mix(x_orig, chains, decision: MixDecision) -> np.ndarray:
    """``m * x_orig + (1 - m) * sum_i w_i chain_i``."""
    if len(chains) != len(decision.w):
        raise ValueError(f"{len(chains)} chain outputs for {len(decision.w)} weights")
    agg = decision.w[0] * np.asarray(chains[0], dtype=np.float64)
    for wi, c in zip(decision.w[1:], chains[1:]):
        agg = agg + wi * np.asarray(c, dtype=np.float64)
    return decision.m * np.asarray(x_orig, dtype=np.float64) + (1.0 - decision.m) * agg


def mix_tensor(x_orig, chains, w: Tensor, m: Tensor) -> Tensor:
    """Differentiable ``mix`` in the weights; same operation order as ``mix``."""
    if len(chains) != w.size:
        raise ShapeError(f"{len(chains)} chain outputs for {w.size} weights")
    agg = T.mul(T.getitem(w, slice(0, 1)), Tensor(chains[0]))
    for i in range(1, len(chains)):
        agg = T.add(agg, T.mul(T.getitem(w, slice(i, i + 1)), Tensor(chains[i])))
    return T.add(T.mul(m, Tensor(x_orig)), T.mul(T.sub(1.0, m), agg))


def _check_dist(p, what):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{what} is not a probability distribution")
    return p


def js_consistency(p, q):
    """Jensen-Shannon divergence (natural log) between rows of ``p`` and ``q``."""
    p = _check_dist(p, "p")
    q = _check_dist(q, "q")
    m = 0.5 * (p + q)
    kl_p = (xlogy(p, p) - xlogy(p, m)).sum(axis=-1)
    kl_q = (xlogy(q, q) - xlogy(q, m)).sum(axis=-1)
    out = 0.5 * (kl_p + kl_q)
    return float(out) if out.ndim == 0 else out


def js_logits(a: Tensor, b: Tensor) -> Tensor:
    """Batch-mean JS divergence between ``softmax(a)`` and ``softmax(b)``, differentiable in both."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"js_logits: logits {a.shape} vs {b.shape}")
    p = softmax(a.data, axis=1)
    q = softmax(b.data, axis=1)
    m = 0.5 * (p + q)
    per = 0.5 * ((xlogy(p, p) - xlogy(p, m)).sum(axis=1) + (xlogy(q, q) - xlogy(q, m)).sum(axis=1))
    n = a.shape[0]
    # d JS / d p = (log p - log m) / 2, zero where p = 0; then the softmax Jacobian
    safe_m = np.where(m > 0, m, 1.0)
    gp = 0.5 * np.where(p > 0, np.log(np.where(p > 0, p, 1.0) / safe_m), 0.0)
    gq = 0.5 * np.where(q > 0, np.log(np.where(q > 0, q, 1.0) / safe_m), 0.0)

    def backward(g):
        s = float(np.asarray(g).reshape(-1)[0]) / n
        ga = p * (gp - (p * gp).sum(axis=1, keepdims=True)) * s
        gb = q * (gq - (q * gq).sum(axis=1, keepdims=True)) * s
        return ga, gb

    return T._record(np.array([per.mean()]), (a, b), backward)
