"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever one of
their operands requires a gradient. :func:`grad` replays the tape backwards.
Shapes must match exactly; the only implicit broadcast is a size-1 tensor
(or Python scalar) against an arbitrary tensor.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax as _log_softmax, softmax as _softmax


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the dimension."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; every differentiable op executed inside records
    ``(output, inputs, backward)``. A tape is single-writer.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _record(out_data, inputs, backward) -> Tensor:
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append((out, inputs, backward))
    return out


def grad(loss: Tensor, params, tape: Tape) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters not reachable from the loss receive a zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape))
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.size == 1 or b.size == 1:
        return
    if a.shape != b.shape:
        for dim, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise ShapeError(f"{op}: dimension {dim} differs ({x} vs {y}); shapes {a.shape} and {b.shape}")
        raise ShapeError(f"{op}: rank differs, shapes {a.shape} and {b.shape}")


def _unscalar(g, t: Tensor, other: Tensor):
    # Reduce a broadcast gradient back onto a size-1 operand.
    if t.size == 1 and other.size != 1:
        return np.asarray(g.sum()).reshape(t.shape)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def backward(g):
        return _unscalar(g, a, b), _unscalar(g, b, a)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def backward(g):
        return _unscalar(g, a, b), _unscalar(-g, b, a)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")

    def backward(g):
        return _unscalar(g * b.data, a, b), _unscalar(g * a.data, b, a)

    return _record(a.data * b.data, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def backward(g):
        return (-g * out * out,)

    return _record(out, (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _record(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")

    def backward(g):
        return (g / x.data,)

    return _record(np.log(x.data), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _softmax(x.data, axis=axis)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(x.data, axis=axis)

    def backward(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from err

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out, dtype=np.float64), (x,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: operand shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), backward)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis), 1.0 / float(n))


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()

    def backward(g):
        return (g.sum(axis=0),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimension mismatch ({a.shape[1]} vs {b.shape[0]})")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., j] + b[j]``: the one explicit row-broadcast."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: last dimension {x.shape[-1]} vs bias {b.shape}")

    def backward(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _record(x.data + b.data, (x, b), backward)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)
# ---------------------------------------------------------------------------


def _norm_padding(padding):
    if padding is None:
        return (0, 0), (0, 0)
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    ph, pw = padding
    ph = (ph, ph) if isinstance(ph, (int, np.integer)) else tuple(ph)
    pw = (pw, pw) if isinstance(pw, (int, np.integer)) else tuple(pw)
    return ph, pw


def conv2d_shape(in_shape, k_shape, padding=None, groups: int = 1):
    """Validate a convolution and return its output shape."""
    if len(in_shape) != 4:
        raise ShapeError(f"conv2d: input must be 4-d (batch, ch, H, W), got {tuple(in_shape)}")
    if len(k_shape) != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d (ch_out, ch_in/groups, kh, kw), got {tuple(k_shape)}")
    b, cin, h, w = in_shape
    cout, cin_g, kh, kw = k_shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: groups={groups} must divide ch_in={cin} and ch_out={cout}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: kernel dimension 1 is {cin_g}, expected ch_in/groups={cin // groups}")
    (pt, pb), (pl, pr) = _norm_padding(padding)
    ho = h + pt + pb - kh + 1
    wo = w + pl + pr - kw + 1
    if ho < 1:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {h + pt + pb}")
    if wo < 1:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {w + pl + pr}")
    return b, cout, ho, wo


def conv2d_array(x: np.ndarray, k: np.ndarray, padding=None, groups: int = 1) -> np.ndarray:
    """Cross-correlation on raw arrays (no recording)."""
    b, cout, ho, wo = conv2d_shape(x.shape, k.shape, padding, groups)
    xp = _pad(x, padding)
    return _conv_core(xp, k, groups, ho, wo)


def _pad(x, padding):
    (pt, pb), (pl, pr) = _norm_padding(padding)
    if pt or pb or pl or pr:
        return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return x


_COL_BUDGET = 4_000_000  # doubles per im2col chunk


def _cols(xp, groups, kh, kw, ho, wo):
    # (groups, batch*ho*wo, cin_g*kh*kw) patch matrix
    b, cin = xp.shape[:2]
    cin_g = cin // groups
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # b, cin, ho, wo, kh, kw
    win = win.reshape(b, groups, cin_g, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6)
    return win.reshape(groups, b * ho * wo, cin_g * kh * kw)


def _batch_chunks(b, per_item):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    return [(s, min(b, s + step)) for s in range(0, b, step)]


def _conv_core(xp, k, groups, ho, wo):
    b = xp.shape[0]
    cout, cin_g, kh, kw = k.shape
    cout_g = cout // groups
    kmat = k.reshape(groups, cout_g, cin_g * kh * kw).transpose(0, 2, 1)
    out = np.empty((b, cout, ho, wo))
    for s, e in _batch_chunks(b, cin_g * groups * kh * kw * ho * wo):
        res = np.matmul(_cols(xp[s:e], groups, kh, kw, ho, wo), kmat)  # g, n*ho*wo, cout_g
        out[s:e] = res.reshape(groups, e - s, ho, wo, cout_g).transpose(1, 0, 4, 2, 3).reshape(e - s, cout, ho, wo)
    return out


def conv2d(x: Tensor, k: Tensor, padding=None, groups: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``padding`` is ``(ph, pw)`` for symmetric padding or
    ``((top, bottom), (left, right))``.
    """
    b, cout, ho, wo = conv2d_shape(x.shape, k.shape, padding, groups)
    xp = _pad(x.data, padding)
    out = _conv_core(xp, k.data, groups, ho, wo)
    (pt, pb), (pl, pr) = _norm_padding(padding)

    def backward(g):
        cin = x.shape[1]
        _, cin_g, kh, kw = k.shape
        cout_g = cout // groups
        kmat = k.data.reshape(groups, cout_g, cin_g * kh * kw)
        gk = np.zeros((groups, cin_g * kh * kw, cout_g))
        gxp = np.zeros(xp.shape)
        for s, e in _batch_chunks(b, cin_g * groups * kh * kw * ho * wo):
            n = e - s
            gcols = g[s:e].reshape(n, groups, cout_g, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, cout_g)
            if k.requires_grad:
                gk += np.matmul(_cols(xp[s:e], groups, kh, kw, ho, wo).transpose(0, 2, 1), gcols)
            if not x.requires_grad:
                continue
            gpatch = np.matmul(gcols, kmat)  # g, n*ho*wo, cin_g*kh*kw
            gpatch = gpatch.reshape(groups, n, ho, wo, cin_g, kh, kw).transpose(1, 0, 4, 5, 6, 2, 3)
            gpatch = gpatch.reshape(n, cin, kh, kw, ho, wo)
            dst = gxp[s:e]
            for i in range(kh):
                for j in range(kw):
                    dst[:, :, i:i + ho, j:j + wo] += gpatch[:, :, i, j]
        gx = gxp[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]] if x.requires_grad else None
        gk = gk.transpose(0, 2, 1).reshape(k.shape)
        return gx, gk

    return _record(out, (x, k), backward)


def _check_window(shape, window, op):
    kh, kw = window
    if shape[2] % kh or shape[3] % kw:
        raise ShapeError(f"{op}: window {window} does not divide spatial extents {shape[2:]}")


def avg_pool2d(x: Tensor, window) -> Tensor:
    kh, kw = window
    _check_window(x.shape, window, "avg_pool2d")
    b, c, h, w = x.shape
    out = x.data.reshape(b, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3)
        return (g / (kh * kw),)

    return _record(out, (x,), backward)


def max_pool2d(x: Tensor, window) -> Tensor:
    kh, kw = window
    _check_window(x.shape, window, "max_pool2d")
    b, c, h, w = x.shape
    blocks = x.data.reshape(b, c, h // kh, kh, w // kw, kw).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // kh, w // kw, kh * kw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, h // kh, w // kw, kh, kw).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b, c, h, w),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization (per channel, axis 1)
# ---------------------------------------------------------------------------


def _chan(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm_train(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5):
    """Normalize with batch statistics.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays
    (biased variance) for running-average bookkeeping.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: expected per-channel parameters of length {x.shape[1]}")
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - _chan(mu, x.ndim)) * _chan(inv, x.ndim)
    out = xhat * _chan(scale.data, x.ndim) + _chan(shift.data, x.ndim)
    n = x.size / x.shape[1]

    def backward(g):
        gscale = np.sum(g * xhat, axis=axes)
        gshift = np.sum(g, axis=axes)
        gxhat = g * _chan(scale.data, x.ndim)
        gx = _chan(inv / n, x.ndim) * (
            n * gxhat
            - _chan(np.sum(gxhat, axis=axes), x.ndim)
            - xhat * _chan(np.sum(gxhat * xhat, axis=axes), x.ndim)
        )
        return gx, gscale, gshift

    return _record(out, (x, scale, shift), backward), mu, var


def batch_norm_eval(x: Tensor, scale: Tensor, shift: Tensor, running_mean, running_var, eps: float = 1e-5) -> Tensor:
    """Affine normalization with fixed running statistics."""
    rm = np.asarray(running_mean)
    sd = np.sqrt(np.asarray(running_var) + eps)
    coef = scale.data / sd
    offset = shift.data - coef * rm
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        xhat = (x.data - _chan(rm, x.ndim)) / _chan(sd, x.ndim)
        return g * _chan(coef, x.ndim), np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return _record(x.data * _chan(coef, x.ndim) + _chan(offset, x.ndim), (x, scale, shift), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    lp = log_softmax(logits, axis=1)
    return mul(tensor_sum(mul(lp, Tensor(onehot))), -1.0 / len(labels))

