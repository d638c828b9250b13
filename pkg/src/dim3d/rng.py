"""Named, independent random streams.

Each stream is a PCG64 generator (64-bit state transition, 128-bit state)
seeded from ``SeedSequence([seed, crc32(name), *keys])``, so adding a new
call site never shifts the draws seen by existing ones.  Gaussian variates
use the Box-Muller transform on the stream's uniforms.
"""
from __future__ import annotations

import zlib

import numpy as np


class Stream:
    def __init__(self, seed: int, name: str, *keys: int):
        self.name = name
        ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]
                                    + [int(k) for k in keys])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)          # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
