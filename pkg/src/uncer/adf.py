"""Assumed density filtering: propagate factorized Gaussian moments.

An input segment is lifted to ``N(x, u)`` and every decoder layer maps a
(mean, variance) pair to the moment-matched Gaussian of its output. Linear
maps and batchnorm are exact; ReLU uses the rectified-Gaussian moments;
max pooling uses Clark's pairwise approximation. Softmax is not propagated:
the result is the pair of logit moments.

The default keeps only per-unit variances. ``covariance="full"`` instead
tracks, per example, a factor of the input-noise covariance through every
layer (exact for the linear ones, statistical linearization at ReLU and max)
plus a diagonal residual, which captures the cross-unit correlations that
convolution and pooling create. It costs one propagated column per input
element, so it is meant for small montages and oracle checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx, ndtr

from .decoder import DecoderModel, DropoutMask, as_batch
from .tensor import ShapeError, _check_window, conv2d_array

_SQRT_2PI = np.sqrt(2.0 * np.pi)
_SQRT_HALF_PI = np.sqrt(np.pi / 2.0)


class ADFError(ValueError):
    """A layer produced invalid moments; the message carries the layer index."""


@dataclass
class MomentTensor:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ShapeError(f"mean shape {self.mean.shape} != var shape {self.var.shape}")

    @property
    def shape(self):
        return self.mean.shape


@dataclass(frozen=True)
class InputNoise:
    """Input variance ``u``: a scalar, or one value per channel when ``per_channel``."""

    u: object = 0.0
    per_channel: bool = False

    def __post_init__(self):
        if np.any(np.asarray(self.u, dtype=np.float64) < 0):
            raise ValueError(f"input noise variance must be non-negative, got {self.u}")


def lift(x, noise: InputNoise | float) -> MomentTensor:
    """Gaussian around the observed segment(s) with variance ``u``."""
    if not isinstance(noise, InputNoise):
        noise = InputNoise(noise)
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(noise.u, dtype=np.float64)
    if not noise.per_channel:
        return MomentTensor(x.copy(), np.full(x.shape, float(u)))
    axis = 0 if x.ndim == 2 else 1
    if u.shape != (x.shape[axis],):
        raise ShapeError(f"per-channel noise has {u.shape} entries, input has {x.shape[axis]} channels")
    shape = [1] * x.ndim
    shape[axis] = -1
    return MomentTensor(x.copy(), np.broadcast_to(u.reshape(shape), x.shape).copy())


# ---------------------------------------------------------------------------
# per-layer rules
# ---------------------------------------------------------------------------


def adf_linear(m: MomentTensor, weight, bias=None, padding=None, groups: int = 1) -> MomentTensor:
    """Convolution (4-d weight) or dense map (2-d weight, ``x @ W``)."""
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim == 4:
        mean = conv2d_array(m.mean, w, padding, groups)
        var = conv2d_array(m.var, w * w, padding, groups)
    elif w.ndim == 2:
        if m.mean.shape[-1] != w.shape[0]:
            raise ShapeError(f"dense: input dimension {m.mean.shape[-1]} vs weight rows {w.shape[0]}")
        mean = m.mean @ w
        var = m.var @ (w * w)
    else:
        raise ShapeError(f"linear weight must be 2-d or 4-d, got shape {w.shape}")
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        mean = mean + (b if w.ndim == 2 else b.reshape(1, -1, 1, 1))
    return MomentTensor(mean, var)


def relu_moments(mu, v):
    """Mean and variance of ``max(0, z)`` for ``z ~ N(mu, v)`` (elementwise)."""
    mu = np.asarray(mu, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    sigma = np.sqrt(v)
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    r = np.where(pos, mu / safe, 0.0)
    q = np.abs(r)
    pdf_q = np.exp(-0.5 * q * q) / _SQRT_2PI
    # r >= 0: direct form; r < 0: Mills-ratio form avoids cancellation in the tail
    cdf = ndtr(r)
    g_pos = r * cdf + pdf_q
    h_pos = (1.0 + r * r) * cdf + r * pdf_q - g_pos * g_pos
    mills = _SQRT_HALF_PI * erfcx(q / np.sqrt(2.0))
    g_neg = pdf_q * (1.0 - q * mills)
    h_neg = pdf_q * ((1.0 + q * q) * mills - q) - g_neg * g_neg
    g = np.where(r >= 0, g_pos, g_neg)
    h = np.where(r >= 0, h_pos, h_neg)
    mean = np.where(pos, sigma * g, np.maximum(mu, 0.0))
    var = np.where(pos, v * h, 0.0)
    if np.any(var < -1e-12 * np.maximum(v, 1.0)):
        raise ADFError("relu produced a negative variance")
    return mean, np.maximum(var, 0.0)


def adf_relu(m: MomentTensor) -> MomentTensor:
    if np.any(m.var < 0):
        raise ADFError("relu input has negative variance")
    return MomentTensor(*relu_moments(m.mean, m.var))


def _chan(v, ndim):
    return np.asarray(v, dtype=np.float64).reshape((1, -1) + (1,) * (ndim - 2))


def adf_batchnorm(m: MomentTensor, running_mean, running_var, scale, shift, eps: float = 1e-5) -> MomentTensor:
    """Eval-mode batchnorm: the affine map ``coef * (x - running_mean) + shift``."""
    nd = m.mean.ndim
    coef = np.asarray(scale, dtype=np.float64) / np.sqrt(np.asarray(running_var, dtype=np.float64) + eps)
    mean = _chan(coef, nd) * (m.mean - _chan(running_mean, nd)) + _chan(shift, nd)
    return MomentTensor(mean, _chan(coef * coef, nd) * m.var)


def _blocks(a, window):
    kh, kw = window
    b, c, h, w = a.shape
    return a.reshape(b, c, h // kh, kh, w // kw, kw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // kh, w // kw, kh * kw)


def adf_avgpool(m: MomentTensor, window) -> MomentTensor:
    """Window mean; variance assumes independent units (sum of variances / n^2)."""
    _check_window(m.shape, window, "adf_avgpool")
    n = window[0] * window[1]
    return MomentTensor(_blocks(m.mean, window).mean(axis=-1), _blocks(m.var, window).sum(axis=-1) / (n * n))


def max_moments(mu1, v1, mu2, v2):
    """Clark's moments of ``max(a, b)`` for independent Gaussians."""
    theta = np.sqrt(v1 + v2)
    pos = theta > 0
    safe = np.where(pos, theta, 1.0)
    alpha = np.where(pos, (mu1 - mu2) / safe, 0.0)
    cdf = ndtr(alpha)
    cdf_neg = ndtr(-alpha)
    pdf = np.exp(-0.5 * alpha * alpha) / _SQRT_2PI
    mean = mu1 * cdf + mu2 * cdf_neg + theta * pdf
    second = (mu1 * mu1 + v1) * cdf + (mu2 * mu2 + v2) * cdf_neg + (mu1 + mu2) * theta * pdf
    var = second - mean * mean
    det_mean = np.maximum(mu1, mu2)
    mean = np.where(pos, mean, det_mean)
    var = np.where(pos, np.maximum(var, 0.0), 0.0)
    return mean, var


def adf_maxpool(m: MomentTensor, window) -> MomentTensor:
    """Iterated pairwise Gaussian max, left to right within each window."""
    _check_window(m.shape, window, "adf_maxpool")
    mb = _blocks(m.mean, window)
    vb = _blocks(m.var, window)
    mean, var = mb[..., 0], vb[..., 0]
    for i in range(1, mb.shape[-1]):
        mean, var = max_moments(mean, var, mb[..., i], vb[..., i])
    return MomentTensor(mean, var)


def adf_dropout(m: MomentTensor, mask) -> MomentTensor:
    """Dropped units carry zero mean and zero variance; kept units pass through."""
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("dropout mask must be binary")
    if mask.shape != m.shape and mask.shape != m.shape[1:]:
        raise ShapeError(f"dropout mask shape {mask.shape} does not match activations {m.shape}")
    return MomentTensor(m.mean * mask, m.var * mask)


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------


@dataclass
class ADFPrefix:
    """Moments at the first dropout layer; independent of the dropout mask."""

    moments: MomentTensor
    start: int


def _apply(model: DecoderModel, index: int, kind: str, spec: dict, m: MomentTensor, mask) -> MomentTensor:
    p = model.params
    cfg = model.config
    if kind == "conv":
        return adf_linear(m, p[spec["weight"]].data, None, spec["padding"], spec["groups"])
    if kind == "bn":
        name = spec["name"]
        return adf_batchnorm(m, model.buffers[f"{name}.running_mean"], model.buffers[f"{name}.running_var"],
                             p[f"{name}.scale"].data, p[f"{name}.shift"].data, cfg.bn_eps)
    if kind == "relu":
        return adf_relu(m)
    if kind == "dropout":
        return m if mask is None else adf_dropout(m, mask.layers[spec["index"]])
    if kind == "avgpool":
        return adf_avgpool(m, spec["window"])
    if kind == "maxpool":
        return adf_maxpool(m, spec["window"])
    if kind == "flatten":
        n = m.shape[0]
        return MomentTensor(m.mean.reshape(n, -1), m.var.reshape(n, -1))
    if kind == "dense":
        return adf_linear(m, p[spec["weight"]].data, p[spec["bias"]].data)
    raise ADFError(f"layer {index}: no moment rule for {kind!r}")


def _run(model, m, layers, offset, mask):
    for i, (kind, spec) in enumerate(layers, start=offset):
        try:
            m = _apply(model, i, kind, spec, m, mask)
        except ADFError as err:
            raise ADFError(f"layer {i} ({kind}): {err}") from err
        except ValueError as err:
            raise ADFError(f"layer {i} ({kind}): {err}") from err
        if np.any(m.var < 0):
            raise ADFError(f"layer {i} ({kind}): negative variance")
    return m


def _to_internal(model: DecoderModel, m0: MomentTensor) -> MomentTensor:
    return MomentTensor(as_batch(model.config, m0.mean), as_batch(model.config, m0.var))


def adf_prefix(model: DecoderModel, m0: MomentTensor) -> ADFPrefix:
    layers = model.layers()
    start = next(i for i, (kind, _) in enumerate(layers) if kind == "dropout")
    return ADFPrefix(_run(model, _to_internal(model, m0), layers[:start], 0, None), start)


def adf_suffix(model: DecoderModel, prefix: ADFPrefix, mask: DropoutMask | None) -> MomentTensor:
    layers = model.layers()
    return _run(model, prefix.moments, layers[prefix.start:], prefix.start, mask)


def adf_forward(model: DecoderModel, m0: MomentTensor, mask: DropoutMask | None = None,
                covariance: str = "diagonal") -> MomentTensor:
    """Logit moments ``(batch, n_classes)`` for input moments shaped like decoder input."""
    if model.mode != "eval":
        raise ADFError("moment propagation requires an eval-mode model")
    if covariance == "diagonal":
        return _run(model, _to_internal(model, m0), model.layers(), 0, mask)
    if covariance != "full":
        raise ValueError(f"covariance must be 'diagonal' or 'full', got {covariance!r}")
    m = _to_internal(model, m0)
    means, vars_ = [], []
    for i in range(m.shape[0]):
        out = _run_full(model, m.mean[i:i + 1], m.var[i:i + 1], mask)
        means.append(out.mean)
        vars_.append(out.var)
    return MomentTensor(np.concatenate(means), np.concatenate(vars_))


# ---------------------------------------------------------------------------
# correlated mode
# ---------------------------------------------------------------------------

FULL_BUDGET = 60_000_000  # largest factor (columns x units) held in memory


@dataclass
class FactorMoments:
    """One example: ``cov = factor^T factor + diag(resid)``; factor rows are noise sources."""

    mean: np.ndarray
    factor: np.ndarray
    resid: np.ndarray

    @property
    def var(self):
        return np.einsum("i...,i...->...", self.factor, self.factor)[None] + self.resid


def _fold(a, window):
    # (..., h, w) -> (..., h/kh, w/kw, kh*kw)
    kh, kw = window
    lead = a.shape[:-2]
    h, w = a.shape[-2:]
    a = a.reshape(lead + (h // kh, kh, w // kw, kw))
    n = len(lead)
    a = a.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3))
    return a.reshape(lead + (h // kh, w // kw, kh * kw))


def _full_apply(model, kind, spec, f: FactorMoments, mask) -> FactorMoments:
    p = model.params
    if kind in ("conv", "dense"):
        w = p[spec["weight"]].data
        if kind == "conv":
            lin = lambda a, k: conv2d_array(a, k, spec["padding"], spec["groups"])
            mean = lin(f.mean, w)
        else:
            lin = lambda a, k: a @ k
            mean = f.mean @ w + p[spec["bias"]].data
        return FactorMoments(mean, lin(f.factor, w), lin(f.resid, w * w))
    if kind == "bn":
        name = spec["name"]
        coef = p[f"{name}.scale"].data / np.sqrt(model.buffers[f"{name}.running_var"] + model.config.bn_eps)
        c = _chan(coef, 4)
        mean = c * (f.mean - _chan(model.buffers[f"{name}.running_mean"], 4)) + _chan(p[f"{name}.shift"].data, 4)
        return FactorMoments(mean, f.factor * c, f.resid * c * c)
    if kind == "relu":
        vf = np.einsum("i...,i...->...", f.factor, f.factor)[None]
        v = vf + f.resid
        mo, vo = relu_moments(f.mean, v)
        sd = np.sqrt(v)
        # Stein: cov(relu(z), y) = P(z > 0) cov(z, y) for jointly Gaussian (z, y)
        slope = np.where(sd > 0, ndtr(f.mean / np.where(sd > 0, sd, 1.0)), (f.mean > 0).astype(np.float64))
        return FactorMoments(mo, f.factor * slope, np.maximum(vo - slope * slope * vf, 0.0))
    if kind == "dropout":
        if mask is None:
            return f
        mk = np.asarray(mask.layers[spec["index"]], dtype=np.float64)
        return FactorMoments(f.mean * mk, f.factor * mk, f.resid * mk)
    if kind == "avgpool":
        window = spec["window"]
        _check_window(f.mean.shape, window, "adf_avgpool")
        n = window[0] * window[1]
        return FactorMoments(_fold(f.mean, window).mean(-1), _fold(f.factor, window).mean(-1),
                             _fold(f.resid, window).sum(-1) / (n * n))
    if kind == "maxpool":
        window = spec["window"]
        _check_window(f.mean.shape, window, "adf_maxpool")
        mb, fb, rb = _fold(f.mean, window), _fold(f.factor, window), _fold(f.resid, window)
        mean, fac, res = mb[..., 0], fb[..., 0], rb[..., 0]
        for i in range(1, mb.shape[-1]):
            mean, fac, res = _max_full(mean, fac, res, mb[..., i], fb[..., i], rb[..., i])
        return FactorMoments(mean, fac, res)
    if kind == "flatten":
        return FactorMoments(f.mean.reshape(1, -1), f.factor.reshape(f.factor.shape[0], -1), f.resid.reshape(1, -1))
    raise ADFError(f"no moment rule for {kind!r}")


def _max_full(m1, f1, r1, m2, f2, r2):
    """Clark's max for correlated Gaussians; the residuals are taken as independent."""
    v1 = np.einsum("i...,i...->...", f1, f1)[None] + r1
    v2 = np.einsum("i...,i...->...", f2, f2)[None] + r2
    c12 = np.einsum("i...,i...->...", f1, f2)[None]
    theta = np.sqrt(np.maximum(v1 + v2 - 2.0 * c12, 0.0))
    pos = theta > 0
    safe = np.where(pos, theta, 1.0)
    alpha = np.where(pos, (m1 - m2) / safe, np.where(m1 >= m2, np.inf, -np.inf))
    a, b = ndtr(alpha), ndtr(-alpha)
    pdf = np.where(pos, np.exp(-0.5 * np.where(pos, alpha, 0.0) ** 2) / _SQRT_2PI, 0.0)
    mean = m1 * a + m2 * b + theta * pdf
    second = (m1 * m1 + v1) * a + (m2 * m2 + v2) * b + (m1 + m2) * theta * pdf
    var = np.maximum(second - mean * mean, 0.0)
    fac = f1 * a + f2 * b
    vf = np.einsum("i...,i...->...", fac, fac)[None]
    return mean, fac, np.maximum(var - vf, 0.0)


def _run_full(model, mean, var, mask) -> MomentTensor:
    shape = mean.shape[1:]
    d = int(np.prod(shape))
    widest = max(d, *(int(np.prod(s)) for s in _unit_counts(model)))
    if d * widest > FULL_BUDGET:
        raise ADFError(f"correlated propagation needs {d} x {widest} factor entries; use covariance='diagonal'")
    factor = (np.eye(d) * np.sqrt(var.reshape(-1))).reshape((d,) + shape)
    f = FactorMoments(mean.copy(), factor, np.zeros_like(mean))
    for i, (kind, spec) in enumerate(model.layers()):
        try:
            f = _full_apply(model, kind, spec, f, mask)
        except ValueError as err:
            raise ADFError(f"layer {i} ({kind}): {err}") from err
    return MomentTensor(f.mean, f.var)


def _unit_counts(model):
    cfg = model.config
    t = cfg.n_samples
    return [(cfg.temporal_filters, cfg.n_channels, t), (cfg.depthwise_filters, 1, t), (cfg.pointwise_filters, 1, t)]
