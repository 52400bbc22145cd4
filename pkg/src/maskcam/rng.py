"""Deterministic random streams for reproducible experiments.

Every source of randomness in the package flows through :class:`Rng`, a thin
wrapper over the counter-based Philox generator keyed by a ``(seed, stream)``
pair.  Distinct stream ids give statistically independent sequences, so each
consumer (mask init, shot noise, shuffling, decoy masks, ...) owns a stream
and adding a new consumer never perturbs the draws of another.

Stream ids are derived from labels with SHA-256, never from Python's salted
``hash``, so the same label maps to the same stream on every run and platform.

Poisson sampling uses inversion for rates below 10 and transformed rejection
(PTRS) above, the scheme implemented by numpy's ``Generator.poisson``; ports
to other languages should pin the same algorithm pair to match statistically.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_to_stream(parent_stream: int, label) -> int:
    """Map a (parent stream, child label) pair to a fresh 64-bit stream id."""
    tag = f"{parent_stream:x}/{label}".encode()
    digest = hashlib.sha256(tag).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded random stream. Single-owner: split, never share across consumers."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label) -> "Rng":
        """Derive an independent child stream named by ``label`` (str or int)."""
        return Rng(self.seed, _label_to_stream(self.stream, label))

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Uniform draws in [lo, hi) as float64."""
        if lo > hi:
            raise ValueError(f"uniform bounds reversed: lo={lo} > hi={hi}")
        return self._gen.random(shape) * (hi - lo) + lo

    def poisson(self, rates) -> np.ndarray:
        """Poisson draws with per-element rates, integer-valued float64."""
        rates = np.asarray(rates, dtype=np.float64)
        if np.any(rates < 0):
            raise ValueError("poisson rates must be non-negative")
        return self._gen.poisson(rates).astype(np.float64)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        """Zero-mean Gaussian draws with the given standard deviation."""
        return self._gen.standard_normal(shape) * scale

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n)."""
        return self._gen.permutation(n)
