"""Seeded random streams.

A :class:`RandomStream` wraps a PCG64 generator seeded through a
``SeedSequence``.  Sub-streams are addressed by integer keys and derived
from the root seed alone, so the draws on sub-stream ``k`` never depend on
how many other sub-streams exist or how much they have been used.
"""

from __future__ import annotations

import numpy as np

MAX_SEED = 2**64 - 1


class RandomStream:
    """Single-owner source of normal and gamma variates.

    Args:
        seed: unsigned 64-bit integer.
    """

    def __init__(self, seed: int = 0, *, _spawn_key: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed <= MAX_SEED:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(entropy=seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))
        self._children: dict[int, RandomStream] = {}

    def substream(self, key: int) -> RandomStream:
        """Return the persistent sub-stream with the given key.

        The same object is returned on every call, so it keeps advancing.
        """
        key = int(key)
        if key < 0:
            raise ValueError("substream keys are non-negative")
        child = self._children.get(key)
        if child is None:
            child = RandomStream(self.seed, _spawn_key=self.spawn_key + (key,))
            self._children[key] = child
        return child

    def standard_normal_vec(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError(f"need n >= 1 normal draws, got {n}")
        return self._gen.standard_normal(int(n))

    def gamma(self, shape: float, scale: float) -> float:
        """One draw with density proportional to g**(shape-1) * exp(-g/scale)."""
        if not (shape > 0 and scale > 0) or not np.isfinite(shape) or not np.isfinite(scale):
            raise ValueError(f"gamma parameters must be positive and finite, got shape={shape}, scale={scale}")
        return float(self._gen.gamma(shape, scale))

    def gamma_vec(self, shape: float, scale: float, n: int) -> np.ndarray:
        if not (shape > 0 and scale > 0):
            raise ValueError(f"gamma parameters must be positive, got shape={shape}, scale={scale}")
        return self._gen.gamma(shape, scale, size=int(n))

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, key={self.spawn_key})"


def standard_normal_vec(stream: RandomStream, n: int) -> np.ndarray:
    return stream.standard_normal_vec(n)


def gamma_sample(stream: RandomStream, shape: float, scale: float) -> float:
    return stream.gamma(shape, scale)
