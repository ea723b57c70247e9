"""Three-block convolutional EEG decoder and its standard training loop.

Block 1: temporal convolution + batchnorm.
Block 2: depthwise spatial convolution (spans every electrode) + batchnorm +
ReLU + dropout.
Block 3: pointwise convolution + batchnorm + ReLU + dropout + pooling.
Head: dense layer; softmax is applied by the caller.

Input segments have shape ``(batch, n_channels, 1, n_samples)`` (a missing
singleton axis is added). Internally the electrodes become the height axis.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .io import read_checkpoint, write_checkpoint
from .optim import AdamState, adam_step
from .rng import RngStream, as_stream
from .tensor import ShapeError, Tape, Tensor


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class DecoderConfig:
    n_channels: int = 22
    n_samples: int = 400
    n_classes: int = 4
    temporal_filters: int = 8
    depth_multiplier: int = 2
    pointwise_filters: int = 16
    temporal_kernel: int = 64
    pool_size: int = 8
    pool: str = "avg"
    dropout_rate_train: float = 0.25
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_channels", "n_samples", "n_classes", "temporal_filters",
                     "depth_multiplier", "pointwise_filters", "temporal_kernel", "pool_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be at least 2, got {self.n_classes}")
        if self.temporal_kernel > self.n_samples:
            raise ConfigError(
                f"temporal_kernel {self.temporal_kernel} is longer than the window n_samples={self.n_samples}")
        if self.n_samples % self.pool_size:
            raise ConfigError(f"pool_size {self.pool_size} must divide n_samples {self.n_samples}")
        if self.pool not in ("avg", "max"):
            raise ConfigError(f"pool must be 'avg' or 'max', got {self.pool!r}")
        if not 0.0 <= self.dropout_rate_train < 1.0:
            raise ConfigError(f"dropout_rate_train must lie in [0, 1), got {self.dropout_rate_train}")

    @property
    def depthwise_filters(self) -> int:
        return self.temporal_filters * self.depth_multiplier

    @property
    def feature_dim(self) -> int:
        return self.pointwise_filters * (self.n_samples // self.pool_size)

    @property
    def temporal_padding(self):
        k = self.temporal_kernel
        return (0, 0), ((k - 1) // 2, k // 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "DecoderConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown decoder config keys: {sorted(unknown)}")
        out = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            out[key] = type(default)(raw) if not isinstance(raw, type(default)) else raw
        return cls(**out)


@dataclass
class DropoutMask:
    """Binary unit masks for the decoder's dropout layers (no batch axis).

    ``layers[i]`` multiplies the activations entering dropout layer ``i``
    verbatim: no rescaling at test time.
    """

    layers: list
    keep_prob: float = 1.0

    def __post_init__(self):
        for i, m in enumerate(self.layers):
            m = np.asarray(m, dtype=np.float64)
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValueError(f"dropout mask layer {i} is not binary")
            self.layers[i] = m

    @classmethod
    def ones(cls, config: DecoderConfig) -> "DropoutMask":
        return cls([np.ones(s) for s in dropout_shapes(config)], 1.0)

    @classmethod
    def sample(cls, config: DecoderConfig, keep_prob: float, stream: RngStream) -> "DropoutMask":
        return cls([stream.bernoulli(s, keep_prob) for s in dropout_shapes(config)], keep_prob)


def dropout_shapes(config: DecoderConfig):
    t = config.n_samples
    return [(config.depthwise_filters, 1, t), (config.pointwise_filters, 1, t)]


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)


class DecoderModel:
    """Parameters, batchnorm running statistics and mode of one decoder."""

    def __init__(self, config: DecoderConfig, params: "OrderedDict[str, Tensor]", buffers: dict,
                 stream: RngStream | None = None):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.mode = "eval"
        self.stream = stream if stream is not None else RngStream(0)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: np.array(v, dtype=np.float64) for k, v in self.buffers.items()})
        return out

    def copy(self) -> "DecoderModel":
        params = OrderedDict((k, Tensor(p.data.copy(), requires_grad=p.requires_grad, name=k))
                             for k, p in self.params.items())
        m = DecoderModel(self.config, params, {k: np.array(v) for k, v in self.buffers.items()}, self.stream)
        m.mode = self.mode
        return m

    def layers(self):
        """Architecture as an ordered list of ``(kind, spec)`` shared by every forward."""
        cfg = self.config
        pool = "avgpool" if cfg.pool == "avg" else "maxpool"
        return [
            ("conv", {"weight": "temporal.weight", "padding": cfg.temporal_padding, "groups": 1}),
            ("bn", {"name": "bn1"}),
            ("conv", {"weight": "depthwise.weight", "padding": None, "groups": cfg.temporal_filters}),
            ("bn", {"name": "bn2"}),
            ("relu", {}),
            ("dropout", {"index": 0}),
            ("conv", {"weight": "pointwise.weight", "padding": None, "groups": 1}),
            ("bn", {"name": "bn3"}),
            ("relu", {}),
            ("dropout", {"index": 1}),
            (pool, {"window": (1, cfg.pool_size)}),
            ("flatten", {}),
            ("dense", {"weight": "dense.weight", "bias": "dense.bias"}),
        ]

    # checkpointing -------------------------------------------------------------

    def save(self, path) -> None:
        write_checkpoint(path, "DECO", self.config.to_dict(), self.state_arrays())

    @classmethod
    def load(cls, path) -> "DecoderModel":
        _, cfg, arrays = read_checkpoint(path, section="DECO")
        config = DecoderConfig.from_dict(cfg)
        template = build_decoder(config, RngStream(0))
        missing = set(template.state_arrays()) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint {path} lacks tensors {sorted(missing)}")
        for k, p in template.params.items():
            p.data = arrays[k]
        for k in template.buffers:
            template.buffers[k] = arrays[k]
        return template


def build_decoder(config: DecoderConfig, stream) -> DecoderModel:
    """Initialize a decoder with fan-in scaled uniform weights."""
    stream = as_stream(stream)
    cfg = config
    shapes = OrderedDict([
        ("temporal.weight", (cfg.temporal_filters, 1, 1, cfg.temporal_kernel)),
        ("bn1.scale", (cfg.temporal_filters,)),
        ("bn1.shift", (cfg.temporal_filters,)),
        ("depthwise.weight", (cfg.depthwise_filters, 1, cfg.n_channels, 1)),
        ("bn2.scale", (cfg.depthwise_filters,)),
        ("bn2.shift", (cfg.depthwise_filters,)),
        ("pointwise.weight", (cfg.pointwise_filters, cfg.depthwise_filters, 1, 1)),
        ("bn3.scale", (cfg.pointwise_filters,)),
        ("bn3.shift", (cfg.pointwise_filters,)),
        ("dense.weight", (cfg.feature_dim, cfg.n_classes)),
        ("dense.bias", (cfg.n_classes,)),
    ])
    init = stream.child("init")
    params = OrderedDict()
    for name, shape in shapes.items():
        if name.endswith(".scale"):
            data = np.ones(shape)
        elif name.endswith(".shift"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name != "dense.weight" else shape[0]
            if name == "dense.bias":
                fan_in = cfg.feature_dim
            bound = 1.0 / np.sqrt(fan_in)
            data = init.child(name).uniform(shape, -bound, bound)
        params[name] = Tensor(data, requires_grad=True, name=name)
    buffers = {}
    for bn, width in (("bn1", cfg.temporal_filters), ("bn2", cfg.depthwise_filters), ("bn3", cfg.pointwise_filters)):
        buffers[f"{bn}.running_mean"] = np.zeros(width)
        buffers[f"{bn}.running_var"] = np.ones(width)
    return DecoderModel(cfg, params, buffers, stream.child("dropout"))


def as_batch(config: DecoderConfig, x) -> np.ndarray:
    """Coerce segments to ``(batch, 1, n_channels, n_samples)``."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, :, None, :]
    if x.ndim != 4 or x.shape[2] != 1:
        raise ShapeError(f"expected segments shaped (batch, channels, 1, samples), got {x.shape}")
    if x.shape[1] != config.n_channels:
        raise ShapeError(f"dimension 1 (channels) is {x.shape[1]}, model expects {config.n_channels}")
    if x.shape[3] != config.n_samples:
        raise ShapeError(f"dimension 3 (samples) is {x.shape[3]}, model expects {config.n_samples}")
    return x.transpose(0, 2, 1, 3)


def forward(model: DecoderModel, batch, mask: DropoutMask | None = None, stream: RngStream | None = None,
            return_features: bool = False):
    """Logits of shape ``(batch, n_classes)``.

    ``batch`` may be a Tensor that requires a gradient (the input path is
    then differentiable). In train mode dropout is inverted and drawn from
    ``stream`` (default: the model's own stream) unless ``mask`` is given.
    """
    cfg = model.config
    if isinstance(batch, Tensor) and batch.requires_grad:
        arr = as_batch(cfg, batch.data)
        # moving the singleton axis is a pure reshape in row-major order
        x = T.reshape(batch, arr.shape)
    else:
        x = Tensor(as_batch(cfg, batch))
    n = x.shape[0]
    train = model.mode == "train"
    stream = stream if stream is not None else model.stream
    p = model.params
    features = None
    for kind, spec in model.layers():
        if kind == "conv":
            x = T.conv2d(x, p[spec["weight"]], spec["padding"], spec["groups"])
        elif kind == "bn":
            name = spec["name"]
            if train:
                x, mu, var = T.batch_norm_train(x, p[f"{name}.scale"], p[f"{name}.shift"], cfg.bn_eps)
                _update_running(model, name, mu, var, x.size / x.shape[1])
            else:
                x = T.batch_norm_eval(x, p[f"{name}.scale"], p[f"{name}.shift"],
                                      model.buffers[f"{name}.running_mean"],
                                      model.buffers[f"{name}.running_var"], cfg.bn_eps)
        elif kind == "relu":
            x = T.relu(x)
        elif kind == "dropout":
            if mask is not None:
                m = mask.layers[spec["index"]]
                if m.shape != x.shape[1:]:
                    raise ShapeError(f"dropout mask {spec['index']} has shape {m.shape}, activations {x.shape[1:]}")
                x = T.mul(x, Tensor(np.broadcast_to(m, x.shape)))
            elif train and cfg.dropout_rate_train > 0:
                keep = 1.0 - cfg.dropout_rate_train
                m = stream.bernoulli(x.shape, keep) / keep
                x = T.mul(x, Tensor(m))
        elif kind == "avgpool":
            x = T.avg_pool2d(x, spec["window"])
            features = x
        elif kind == "maxpool":
            x = T.max_pool2d(x, spec["window"])
            features = x
        elif kind == "flatten":
            x = T.reshape(x, (n, -1))
        elif kind == "dense":
            x = T.add_bias(T.matmul(x, p[spec["weight"]]), p[spec["bias"]])
    if return_features:
        return x, features
    return x


def _update_running(model, name, mu, var, count):
    mom = model.config.bn_momentum
    unbiased = var * count / max(count - 1, 1)
    rm = model.buffers[f"{name}.running_mean"]
    rv = model.buffers[f"{name}.running_var"]
    model.buffers[f"{name}.running_mean"] = (1 - mom) * rm + mom * mu
    model.buffers[f"{name}.running_var"] = (1 - mom) * rv + mom * unbiased


def predict_logits(model: DecoderModel, x, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits without recording, batched."""
    prev = model.mode
    model.eval()
    x = np.asarray(x, dtype=np.float64)
    outs = []
    with T.no_grad():
        for s in range(0, len(x), batch_size):
            outs.append(forward(model, x[s:s + batch_size]).data)
    model.mode = prev
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.config.n_classes))


def embed(model: DecoderModel, x) -> np.ndarray:
    """Batch embedding: eval-mode pooled block-3 activations averaged over batch and time."""
    prev = model.mode
    model.eval()
    with T.no_grad():
        _, feats = forward(model, x, return_features=True)
    model.mode = prev
    return feats.data.mean(axis=(0, 2, 3))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def evaluate(model: DecoderModel, x, y) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    logits = predict_logits(model, x)
    y = np.asarray(y, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean()), float((logits.argmax(axis=1) == y).mean())


def _xy(dataset):
    if hasattr(dataset, "segments"):
        return np.asarray(dataset.segments), np.asarray(dataset.labels)
    x, y = dataset
    return np.asarray(x), np.asarray(y)


def check_labels(y, n_classes: int, what: str = "dataset"):
    if len(y) == 0:
        raise ValueError(f"{what} is empty")
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= n_classes):
        bad = y[(y < 0) | (y >= n_classes)][0]
        raise ValueError(f"{what}: label {bad} outside [0, {n_classes})")


def epoch_batches(n: int, batch_size: int, stream: RngStream, epoch: int):
    order = stream.child("shuffle", epoch).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def sgd_step(model: DecoderModel, opt: AdamState, xb, yb, lr: float, stream: RngStream, extra_loss=None):
    """One train-mode cross-entropy step; ``extra_loss(model, logits)`` may add terms."""
    model.train()
    params = model.parameters()
    with Tape() as tape:
        logits = forward(model, xb, stream=stream)
        loss = T.cross_entropy(logits, yb)
        if extra_loss is not None:
            loss = T.add(loss, extra_loss(model, logits))
        grads = T.grad(loss, params, tape)
    adam_step(params, grads, opt, lr=lr)
    return loss.item()


def train(model: DecoderModel, train_set, val_set=None, epochs: int = 40, lr: float = 1e-3,
          batch_size: int = 64, stream=None):
    """Minimize cross-entropy with Adam; returns ``(model, history)`` in eval mode."""
    stream = as_stream(stream if stream is not None else model.stream)
    x, y = _xy(train_set)
    check_labels(y, model.config.n_classes, "training set")
    if val_set is not None:
        xv, yv = _xy(val_set)
        check_labels(yv, model.config.n_classes, "validation set")
    opt = AdamState.for_params(model.parameters())
    history = TrainHistory()
    for epoch in range(epochs):
        for step, idx in enumerate(epoch_batches(len(x), batch_size, stream, epoch)):
            sgd_step(model, opt, x[idx], y[idx], lr, stream.child("dropout", epoch, step))
        loss, acc = evaluate(model, x, y)
        history.train_loss.append(loss)
        history.train_acc.append(acc)
        if val_set is not None:
            vloss, vacc = evaluate(model, xv, yv)
            history.val_loss.append(vloss)
            history.val_acc.append(vacc)
    model.eval()
    return model, history
