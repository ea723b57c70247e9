"""Synthetic motor-imagery style EEG, segmentation, splits and the UEEG file.

UEEG layout (little-endian)::

    b"UEEG"  u8 version=1
    u32 n_trials, n_channels, n_samples, n_classes, n_subjects, sample_rate_hz
    f64 data, trial-major (trial, channel, sample)
    u8 labels[n_trials]  u8 subjects[n_trials]
    u32 len + utf-8 JSON meta
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import expm

from .io import BadMagicError, FormatError, VersionMismatchError, _Reader
from .rng import RngStream, as_stream

UEEG_MAGIC = b"UEEG"
UEEG_VERSION = 1


@dataclass
class TrialSet:
    data: np.ndarray  # (n_trials, n_channels, n_samples)
    labels: np.ndarray
    subjects: np.ndarray
    sample_rate: float
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.data.ndim != 3:
            raise ValueError(f"trial data must be 3-d (trials, channels, samples), got {self.data.shape}")
        n = self.data.shape[0]
        if self.labels.shape != (n,) or self.subjects.shape != (n,):
            raise ValueError("labels and subjects need one entry per trial")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def n_trials(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_samples(self):
        return self.data.shape[2]

    @property
    def n_subjects(self):
        return int(self.subjects.max()) + 1 if len(self.subjects) else 0

    def take(self, idx) -> "TrialSet":
        return TrialSet(self.data[idx], self.labels[idx], self.subjects[idx], self.sample_rate,
                        self.n_classes, dict(self.meta))


@dataclass
class SegmentSet:
    segments: np.ndarray  # (n_seg, n_channels, window)
    labels: np.ndarray
    subjects: np.ndarray
    trial_index: np.ndarray  # source trial of each segment
    window: int
    stride: int
    n_classes: int
    sample_rate: float = 250.0

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "SegmentSet":
        return SegmentSet(self.segments[idx], self.labels[idx], self.subjects[idx], self.trial_index[idx],
                          self.window, self.stride, self.n_classes, self.sample_rate)

    def with_segments(self, segments) -> "SegmentSet":
        return SegmentSet(np.asarray(segments, dtype=np.float64), self.labels, self.subjects, self.trial_index,
                          self.window, self.stride, self.n_classes, self.sample_rate)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def class_frequencies(n_classes: int) -> np.ndarray:
    """Evenly spaced class rhythms strictly inside 8-30 Hz."""
    return np.linspace(8.0, 30.0, n_classes + 2)[1:-1]


def class_channel_weights(n_classes: int, signal_channels) -> np.ndarray:
    """``(n_classes, n_signal)`` amplitude pattern: each class drives its own subset."""
    n_sig = len(signal_channels)
    subsets = []
    for k in range(n_classes):
        bits = (k % max(2 ** n_sig - 1, 1)) + 1
        subsets.append([(bits >> j) & 1 for j in range(n_sig)])
    return np.asarray(subsets, dtype=np.float64)


def _random_rotation(stream: RngStream, n: int, strength: float) -> np.ndarray:
    if strength == 0:
        return np.eye(n)
    a = stream.normal((n, n))
    skew = (a - a.T) / np.sqrt(2.0 * n)
    return expm(strength * skew)


def synth_clean(n_subjects: int, trials_per_subject: int, n_channels: int, n_samples: int, n_classes: int,
                stream, sample_rate: float = 250.0, signal_channels=(3, 7), class_amplitude: float = 1.0,
                mixing_strength: float = 0.6, background: float = 0.0):
    """Noise-free standardized trials; returns ``(data, labels, subjects, meta)``."""
    stream = as_stream(stream)
    for name, v in (("n_subjects", n_subjects), ("trials_per_subject", trials_per_subject),
                    ("n_channels", n_channels), ("n_samples", n_samples), ("n_classes", n_classes)):
        if int(v) < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    signal_channels = tuple(int(c) for c in signal_channels)
    if any(c < 0 or c >= n_channels for c in signal_channels):
        raise ValueError(f"signal channels {signal_channels} outside [0, {n_channels})")
    freqs = class_frequencies(n_classes)
    weights = class_channel_weights(n_classes, signal_channels)
    t = np.arange(n_samples) / sample_rate
    n = n_subjects * trials_per_subject
    labels = np.empty(n, dtype=np.int64)
    subjects = np.repeat(np.arange(n_subjects), trials_per_subject)
    data = np.empty((n, n_channels, n_samples))
    mixings = []
    for s in range(n_subjects):
        sub = stream.child("subject", s)
        mix = _random_rotation(sub.child("mixing"), n_channels, mixing_strength)
        mixings.append(mix.tolist())
        per_class = trials_per_subject // n_classes
        lab = np.concatenate([np.full(per_class, k) for k in range(n_classes)] +
                             [sub.child("extra-labels").integers(0, n_classes, trials_per_subject - per_class * n_classes)])
        lab = lab[sub.child("label-order").permutation(trials_per_subject)]
        for i in range(trials_per_subject):
            tr = sub.child("trial", i)
            row = s * trials_per_subject + i
            k = int(lab[i])
            labels[row] = k
            # optional background: a few random rhythms per channel, off by default
            bg_f = tr.uniform((n_channels, 3), 1.0, 40.0)
            bg_ph = tr.uniform((n_channels, 3), 0.0, 2 * np.pi)
            bg_a = background * tr.uniform((n_channels, 3), 0.2, 0.5)
            x = np.einsum("cj,cjt->ct", bg_a, np.sin(2 * np.pi * bg_f[..., None] * t + bg_ph[..., None]))
            f = freqs[k] + tr.uniform((), -0.5, 0.5)
            amp = class_amplitude * (1.0 + 0.2 * tr.normal(len(signal_channels)))
            phase = tr.uniform(len(signal_channels), 0.0, 2 * np.pi)
            for j, c in enumerate(signal_channels):
                x[c] += weights[k, j] * amp[j] * np.sin(2 * np.pi * f * t + phase[j])
            data[row] = mix @ x
    # standardize each channel per subject (noise-free signal)
    for s in range(n_subjects):
        sel = subjects == s
        mu = data[sel].mean(axis=(0, 2), keepdims=True)
        sd = data[sel].std(axis=(0, 2), keepdims=True)
        data[sel] = (data[sel] - mu) / np.where(sd > 0, sd, 1.0)
    meta = {
        "generator": "synthetic",
        "class_frequencies": freqs.tolist(),
        "signal_channels": list(signal_channels),
        "class_channel_weights": weights.tolist(),
        "class_amplitude": class_amplitude,
        "mixing_strength": mixing_strength,
        "background": background,
        "mixing": mixings,
        "seed": stream.seed,
        "stream_id": stream.stream_id,
    }
    return data, labels, subjects, meta


def synth_generate(n_subjects: int, trials_per_subject: int, n_channels: int, n_samples: int, n_classes: int,
                   u_true: float, stream, sample_rate: float = 250.0, signal_channels=(3, 7),
                   class_amplitude: float = 1.0, mixing_strength: float = 0.6, background: float = 0.0) -> TrialSet:
    """Standardized synthetic trials plus white noise of variance exactly ``u_true``.

    The noise is drawn from its own child stream, so the clean part is the
    same for every ``u_true`` given the stream.
    """
    if u_true < 0:
        raise ValueError(f"u_true must be non-negative, got {u_true}")
    stream = as_stream(stream)
    data, labels, subjects, meta = synth_clean(n_subjects, trials_per_subject, n_channels, n_samples, n_classes,
                                               stream, sample_rate, signal_channels, class_amplitude,
                                               mixing_strength, background)
    if u_true > 0:
        data = data + stream.child("noise").normal(data.shape, 0.0, np.sqrt(u_true))
    meta["u_true"] = float(u_true)
    return TrialSet(data, labels, subjects, sample_rate, n_classes, meta)


# ---------------------------------------------------------------------------
# segmentation and splits
# ---------------------------------------------------------------------------


def segment_count(n_samples: int, window: int, stride: int) -> int:
    return (n_samples - window) // stride + 1


def segment(trials: TrialSet, window: int = 400, stride: int = 50) -> SegmentSet:
    if stride < 1:
        raise ValueError(f"stride must be at least 1, got {stride}")
    if window < 1 or window > trials.n_samples:
        raise ValueError(f"window {window} does not fit trials of {trials.n_samples} samples")
    per = segment_count(trials.n_samples, window, stride)
    views = sliding_window_view(trials.data, window, axis=2)[:, :, ::stride, :][:, :, :per, :]
    segs = views.transpose(0, 2, 1, 3).reshape(-1, trials.n_channels, window).copy()
    rep = lambda a: np.repeat(a, per)  # noqa: E731
    return SegmentSet(segs, rep(trials.labels), rep(trials.subjects), rep(np.arange(trials.n_trials)),
                      window, stride, trials.n_classes, trials.sample_rate)


def split(data, mode: str = "intra", holdout_subject=None, fraction: float = 0.8, stream=None):
    """Train/test split that never separates the segments of one trial.

    ``intra``: per subject and class, ``round(fraction * n)`` trials train.
    ``cross``: every trial of ``holdout_subject`` goes to test.
    """
    is_seg = isinstance(data, SegmentSet)
    trial_of = data.trial_index if is_seg else np.arange(data.n_trials)
    trial_ids = np.unique(trial_of)
    first = {t: i for i, t in reversed(list(enumerate(trial_of)))}
    t_subject = np.array([data.subjects[first[t]] for t in trial_ids])
    t_label = np.array([data.labels[first[t]] for t in trial_ids])
    if mode == "cross":
        if holdout_subject is None or holdout_subject not in set(t_subject.tolist()):
            raise ValueError(f"unknown holdout subject {holdout_subject!r}")
        test_trials = set(trial_ids[t_subject == holdout_subject].tolist())
    elif mode == "intra":
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
        stream = as_stream(stream)
        test_trials = set()
        for s in np.unique(t_subject):
            for k in np.unique(t_label):
                ids = trial_ids[(t_subject == s) & (t_label == k)]
                if not len(ids):
                    continue
                ids = ids[stream.child("split", int(s), int(k)).permutation(len(ids))]
                n_train = int(round(fraction * len(ids)))
                test_trials.update(ids[n_train:].tolist())
    else:
        raise ValueError(f"split mode must be 'intra' or 'cross', got {mode!r}")
    in_test = np.array([t in test_trials for t in trial_of])
    train_idx = np.flatnonzero(~in_test)
    test_idx = np.flatnonzero(in_test)
    return data.take(train_idx), data.take(test_idx)


# ---------------------------------------------------------------------------
# UEEG container
# ---------------------------------------------------------------------------


def write_dataset(trials: TrialSet, path) -> None:
    if trials.n_subjects > 255 or trials.n_classes > 255:
        raise ValueError("UEEG stores labels and subjects as u8")
    rate = int(round(trials.sample_rate))
    header = struct.pack("<4sB6I", UEEG_MAGIC, UEEG_VERSION, trials.n_trials, trials.n_channels,
                         trials.n_samples, trials.n_classes, trials.n_subjects, rate)
    meta = json.dumps(trials.meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(trials.data, dtype="<f8").tobytes())
        fh.write(trials.labels.astype(np.uint8).tobytes())
        fh.write(trials.subjects.astype(np.uint8).tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def read_dataset(path) -> TrialSet:
    r = _Reader(Path(path).read_bytes(), f"dataset {path}")
    if r.take(4) != UEEG_MAGIC:
        raise BadMagicError(f"{path}: not a UEEG file (bad magic)")
    (version,) = r.unpack("<B")
    if version != UEEG_VERSION:
        raise VersionMismatchError(f"{path}: UEEG version {version}, expected {UEEG_VERSION}")
    n_trials, n_channels, n_samples, n_classes, _n_subjects, rate = r.unpack("<6I")
    data = r.array(n_trials * n_channels * n_samples, "<f8").reshape(n_trials, n_channels, n_samples)
    labels = r.array(n_trials, "u1").astype(np.int64)
    subjects = r.array(n_trials, "u1").astype(np.int64)
    (n_meta,) = r.unpack("<I")
    meta = json.loads(r.take(n_meta).decode()) if n_meta else {}
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} unexpected trailing bytes")
    return TrialSet(data.astype(np.float64), labels, subjects, float(rate), n_classes, meta)
