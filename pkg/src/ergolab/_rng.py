"""Seeded random streams.

Every path owns a slot in a fixed-size block; each block is driven by its own
counter-based Philox generator keyed by ``(seed, block)``.  Growing
``n_paths`` or the number of steps never changes earlier paths, and two
simulations with the same seed and time step share increments exactly.
"""
from __future__ import annotations

import hashlib

import numpy as np

BLOCK_SIZE = 256


def substream_seed(seed: int, name: str) -> int:
    """Derive a 64-bit seed for a named sub-stream of ``seed``."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generator(seed: int, *words: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *words])))


class GaussianStreams:
    """Standard normal draws of shape ``(n_paths, dim)`` per step.

    Parameters
    ----------
    seed : int
        Stream seed.
    n_paths, dim : int
        Batch shape of one step.
    chunk : int
        Steps drawn per generator call; does not affect the values.
    """

    def __init__(self, seed: int, n_paths: int, dim: int, chunk: int = 64):
        self.seed = int(seed)
        self.n_paths = int(n_paths)
        self.dim = int(dim)
        self.chunk = max(1, int(chunk))
        n_blocks = -(-self.n_paths // BLOCK_SIZE)
        self._gens = [generator(self.seed, b) for b in range(n_blocks)]
        self._buffer = np.empty((0, self.n_paths, self.dim))
        self._pos = 0

    def draw(self, n_steps: int) -> np.ndarray:
        """Return the next ``n_steps`` draws as ``(n_steps, n_paths, dim)``."""
        out = np.empty((n_steps, self.n_paths, self.dim))
        filled = 0
        while filled < n_steps:
            if self._pos >= self._buffer.shape[0]:
                self._refill(max(self.chunk, 1))
            take = min(n_steps - filled, self._buffer.shape[0] - self._pos)
            out[filled:filled + take] = self._buffer[self._pos:self._pos + take]
            self._pos += take
            filled += take
        return out

    def step(self) -> np.ndarray:
        return self.draw(1)[0]

    def _refill(self, n_steps: int) -> None:
        parts = []
        remaining = self.n_paths
        for gen in self._gens:
            block = gen.standard_normal((n_steps, BLOCK_SIZE, self.dim))
            parts.append(block[:, :min(BLOCK_SIZE, remaining)])
            remaining -= BLOCK_SIZE
        self._buffer = np.concatenate(parts, axis=1)
        self._pos = 0
