"""Seeded random number generation with reproducible, derivable streams.

All randomness in the package (weight init, dataset shuffling, fixture
synthesis) flows through `Rng`, which wraps numpy's PCG64 bit generator.
PCG64 produces the same draw sequence for the same seed on every
platform, so a (seed, config) pair pins every emitted number.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "pcg64"


class Rng:
    """A seeded PCG64 stream plus deterministic child-stream derivation."""

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.algorithm = ALGORITHM
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, tag):
        """Child stream whose seed is a hash of (seed, tag).

        Used to give independent subsystems (init, per-epoch shuffles)
        their own streams without coupling their draw counts.
        """
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode("utf-8")).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def uniform(self, low, high, shape=(), dtype=np.float32):
        # Draw in float64 first so float32 and float64 streams agree up to rounding.
        values = self._gen.uniform(low, high, size=shape)
        return np.asarray(values, dtype=dtype)

    def normal(self, mean, std, shape=(), dtype=np.float32):
        values = self._gen.normal(mean, std, size=shape)
        return np.asarray(values, dtype=dtype)

    def integers(self, low, high, shape=()):
        return self._gen.integers(low, high, size=shape)

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle of a list."""
        for i in range(len(items) - 1, 0, -1):
            j = int(self._gen.integers(0, i + 1))
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[int(self._gen.integers(0, len(items)))]


def xavier_uniform(rng, fan_out, fan_in, shape=None, dtype=np.float32):
    """Scaled-uniform init with the fan-based bound sqrt(6 / (fan_in + fan_out))."""
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    if shape is None:
        shape = (fan_out, fan_in)
    return rng.uniform(-bound, bound, shape, dtype=dtype)
