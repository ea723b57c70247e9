"""Counter-based, splittable random streams.

Every stream is a Philox generator keyed by ``(seed, stream_id)``. Child
streams derive their id from a hash of the parent id and a label, so the
values a consumer sees never depend on how many draws another consumer made.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _derive_id(parent: int, labels) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(parent & _MASK64).to_bytes(8, "little"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    ``counter`` is the number of 64-bit words consumed so far; two streams
    with the same seed and id produce bit-identical sequences.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def counter(self) -> int:
        state = self._bitgen.state["state"]
        return int(state["counter"][0]) * 4 - (4 - int(self._bitgen.state["buffer_pos"])) % 4

    def child(self, *labels) -> "RngStream":
        """Independent stream derived from this one's identity (not its position)."""
        return RngStream(self.seed, _derive_id(self.stream_id, labels))

    # draws ------------------------------------------------------------------

    def normal(self, shape, mean=0.0, std=1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be non-negative, got {std}")
        z = self._gen.standard_normal(shape)
        return mean + std * z

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def bernoulli(self, shape, p: float) -> np.ndarray:
        """0/1 float array with P(1) = p."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {p}")
        return (self._gen.random(shape) < p).astype(np.float64)

    def poisson(self, lam) -> np.ndarray:
        return self._gen.poisson(lam).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace=True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def as_stream(seed_or_stream) -> RngStream:
    if isinstance(seed_or_stream, RngStream):
        return seed_or_stream
    if seed_or_stream is None:
        return RngStream(0)
    return RngStream(int(seed_or_stream))
