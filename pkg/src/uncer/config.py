"""Experiment configuration: a sectioned ``key = value`` text file.

Unknown sections and keys are errors. Every section is optional; omitted
keys keep their defaults. Example::

    [data]
    n_subjects = 3
    window = 400

    [uncertainty]
    n_passes = 200
    phi = 0.1
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace

from .augment.policy import AugmentConfig
from .decoder import ConfigError, DecoderConfig
from .uncertainty import DEFAULT_NOISE_GRID


@dataclass(frozen=True)
class DataConfig:
    n_subjects: int = 3
    trials_per_subject: int = 48
    n_channels: int = 22
    n_samples: int = 1000
    n_classes: int = 4
    u_true: float = 0.1
    sample_rate: float = 250.0
    signal_channels: tuple = (3, 7)
    class_amplitude: float = 1.0
    mixing_strength: float = 0.6
    background: float = 0.0
    window: int = 400
    stride: int = 50
    split: str = "intra"
    holdout_subject: int = 0
    fraction: float = 0.8

    def __post_init__(self):
        if self.split not in ("intra", "cross"):
            raise ConfigError(f"data.split must be 'intra' or 'cross', got {self.split!r}")
        if self.window > self.n_samples:
            raise ConfigError(f"data.window {self.window} exceeds n_samples {self.n_samples}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 64


@dataclass(frozen=True)
class UncertaintySection:
    n_passes: int = 200
    phi: float = 0.1
    u: float = 0.1
    covariance: str = "diagonal"
    noise_grid: tuple = DEFAULT_NOISE_GRID
    dropout_points: int = 40


@dataclass(frozen=True)
class EvalConfig:
    n_bins: int = 15
    corruptions: tuple = ("gaussian_noise", "shot_noise", "impulse_noise", "motion_blur",
                          "zoom_blur", "intensity", "contrast", "elastic")
    severities: tuple = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class AugmentSection:
    epochs: int = 40
    variant: str = "meta"
    width: int = 3
    depth: int = 3
    inner_steps: int = 1
    inner_lr: float = 1e-3
    lam: float = 15.0
    seen_count: int = 6
    meta_lr: float = 1e-3
    hidden_dim: int = 16
    severity: int = 3

    def augment_config(self) -> AugmentConfig:
        d = asdict(self)
        d.pop("epochs")
        d.pop("variant")
        return AugmentConfig(**d)


@dataclass(frozen=True)
class AttributionConfig:
    runs: int = 20
    n_passes: int = 20
    layout: str = "auto"  # auto | bci_iv_2a | circle | path to a name,x,y file


DECODER_KEYS = ("temporal_filters", "depth_multiplier", "pointwise_filters", "temporal_kernel", "pool_size",
                "pool", "dropout_rate_train", "bn_momentum", "bn_eps")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    decoder: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    uncertainty: UncertaintySection = field(default_factory=UncertaintySection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)

    def __post_init__(self):
        # store every decoder key so that equal settings compare equal
        unknown = set(self.decoder) - set(DECODER_KEYS)
        if unknown:
            raise ConfigError(f"unknown decoder key(s): {sorted(unknown)}")
        full = {k: self.decoder.get(k, getattr(DecoderConfig, k)) for k in DECODER_KEYS}
        object.__setattr__(self, "decoder", full)

    def decoder_config(self, n_channels: int, n_samples: int, n_classes: int) -> DecoderConfig:
        return DecoderConfig(n_channels=n_channels, n_samples=n_samples, n_classes=n_classes, **self.decoder)

    def to_text(self) -> str:
        """Canonical text form (all keys, fixed order); hashing this gives the config hash."""
        lines = []
        for name in _SECTIONS:
            sec = getattr(self, name)
            values = dict(sec) if isinstance(sec, dict) else asdict(sec)
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_format(v)}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


_SECTIONS = ("data", "decoder", "train", "uncertainty", "eval", "augment", "attribution")
_SECTION_TYPES = {"data": DataConfig, "train": TrainConfig, "uncertainty": UncertaintySection,
                  "eval": EvalConfig, "augment": AugmentSection, "attribution": AttributionConfig}


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str, default, key: str):
    try:
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(kind(x.strip()) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return type(default)(raw.strip())
    except ValueError as err:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from err


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\x00unused")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from err
    out = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        items = dict(parser.items(name))
        if name == "decoder":
            unknown = set(items) - set(DECODER_KEYS)
            if unknown:
                raise ConfigError(f"unknown key(s) in [decoder]: {sorted(unknown)}")
            out[name] = {k: _parse_value(v, getattr(DecoderConfig, k), f"decoder.{k}") for k, v in items.items()}
            continue
        cls = _SECTION_TYPES[name]
        known = {f.name: f for f in fields(cls)}
        unknown = set(items) - set(known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
        defaults = cls()
        values = {k: _parse_value(v, getattr(defaults, k), f"{name}.{k}") for k, v in items.items()}
        try:
            out[name] = replace(defaults, **values)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"[{name}]: {err}") from err
    cfg = ExperimentConfig(**out)
    try:
        cfg.decoder_config(cfg.data.n_channels, cfg.data.window, cfg.data.n_classes)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return parse_config(fh.read())
