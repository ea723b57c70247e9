"""LSTM mixing controller: batch embedding -> (chain weights w, original weight m)."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..io import read_checkpoint, write_checkpoint
from ..rng import RngStream
from ..tensor import ShapeError, Tensor
from .policy import MixDecision

CONTROLLER_SECTION = "CTRL"


@dataclass
class ControllerState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.h.shape != self.c.shape:
            raise ShapeError(f"hidden state {self.h.shape} and cell state {self.c.shape} differ")


class Controller:
    """Single-layer LSTM cell plus a linear head with ``width + 1`` outputs."""

    def __init__(self, embedding_dim: int, hidden_dim: int, width: int, params: "OrderedDict[str, Tensor]"):
        self.embedding_dim = int(embedding_dim)
        self.hidden_dim = int(hidden_dim)
        self.width = int(width)
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def initial_state(self) -> ControllerState:
        z = np.zeros((1, self.hidden_dim))
        return ControllerState(z, z.copy())

    def copy(self) -> "Controller":
        return Controller(self.embedding_dim, self.hidden_dim, self.width,
                          OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.params.items()))

    def save(self, path) -> None:
        cfg = {"embedding_dim": self.embedding_dim, "hidden_dim": self.hidden_dim, "width": self.width}
        write_checkpoint(path, CONTROLLER_SECTION, cfg, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "Controller":
        _, cfg, tensors = read_checkpoint(path, CONTROLLER_SECTION)
        params = OrderedDict((k, Tensor(tensors[k], requires_grad=True)) for k in _PARAM_NAMES)
        return cls(int(cfg["embedding_dim"]), int(cfg["hidden_dim"]), int(cfg["width"]), params)


_PARAM_NAMES = ("lstm.w_input", "lstm.w_hidden", "lstm.bias", "head.weight", "head.bias")


def build_controller(embedding_dim: int, hidden_dim: int, width: int, stream: RngStream) -> Controller:
    """Uniform fan-in LSTM weights; the output head starts at zero (uniform w, m = 0.5)."""
    h4 = 4 * hidden_dim
    bound_x = 1.0 / np.sqrt(embedding_dim)
    bound_h = 1.0 / np.sqrt(hidden_dim)
    params = OrderedDict()
    params["lstm.w_input"] = Tensor(stream.child("w_input").uniform((embedding_dim, h4), -bound_x, bound_x), True)
    params["lstm.w_hidden"] = Tensor(stream.child("w_hidden").uniform((hidden_dim, h4), -bound_h, bound_h), True)
    params["lstm.bias"] = Tensor(np.zeros(h4), True)
    params["head.weight"] = Tensor(np.zeros((hidden_dim, width + 1)), True)
    params["head.bias"] = Tensor(np.zeros(width + 1), True)
    return Controller(embedding_dim, hidden_dim, width, params)


def controller_forward(ctrl: Controller, state: ControllerState, embedding):
    """Differentiable step: returns ``(w, m, h_next, c_next)`` as Tensors."""
    emb = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    if emb.shape[1] != ctrl.embedding_dim:
        raise ShapeError(f"controller expects embedding dimension {ctrl.embedding_dim}, got {emb.shape[1]}")
    if state.h.shape != (1, ctrl.hidden_dim):
        raise ShapeError(f"controller state has shape {state.h.shape}, expected (1, {ctrl.hidden_dim})")
    p = ctrl.params
    hd = ctrl.hidden_dim
    gates = T.add_bias(T.add(T.matmul(Tensor(emb), p["lstm.w_input"]), T.matmul(Tensor(state.h), p["lstm.w_hidden"])),
                       p["lstm.bias"])
    i = T.sigmoid(T.getitem(gates, (slice(None), slice(0, hd))))
    f = T.sigmoid(T.getitem(gates, (slice(None), slice(hd, 2 * hd))))
    g = T.tanh(T.getitem(gates, (slice(None), slice(2 * hd, 3 * hd))))
    o = T.sigmoid(T.getitem(gates, (slice(None), slice(3 * hd, 4 * hd))))
    c_next = T.add(T.mul(f, Tensor(state.c)), T.mul(i, g))
    h_next = T.mul(o, T.tanh(c_next))
    out = T.reshape(T.add_bias(T.matmul(h_next, p["head.weight"]), p["head.bias"]), (ctrl.width + 1,))
    w = T.softmax(T.getitem(out, slice(0, ctrl.width)))
    m = T.sigmoid(T.getitem(out, slice(ctrl.width, ctrl.width + 1)))
    return w, m, h_next, c_next


def controller_step(ctrl: Controller, state: ControllerState, embedding):
    """One LSTM step; returns ``(MixDecision, next ControllerState)`` as plain values."""
    with T.no_grad():
        w, m, h, c = controller_forward(ctrl, state, embedding)
    return MixDecision(w.data, float(m.data[0])), ControllerState(h.data, c.data)
