"""Seeded, splittable pseudorandom streams.

One ``Rng`` per worker; never share a stream. ``split`` derives independent
child streams deterministically, so a fixed root seed reproduces every draw
in the whole pipeline bit for bit.
"""

import numpy as np

from ..errors import ArgumentError


class Rng:
    """Deterministic random stream: same seed + same call sequence, same values."""

    def __init__(self, seed: int | None = None, _seq: np.random.SeedSequence | None = None):
        if _seq is None:
            if seed is None:
                raise ArgumentError("Rng requires a seed")
            _seq = np.random.SeedSequence(int(seed))
        self.seed = seed
        self._seq = _seq
        self._gen = np.random.Generator(np.random.PCG64(_seq))

    def split(self, n: int) -> list["Rng"]:
        """Derive ``n`` independent child streams (deterministic in call order)."""
        if n < 1:
            raise ArgumentError("split count must be >= 1")
        return [Rng(self.seed, _seq=child) for child in self._seq.spawn(n)]

    def uniform(self, size=None) -> np.ndarray | float:
        """U[0, 1) draws."""
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray | float:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
