"""Label-addressable deterministic random streams.

Every random choice in the pipeline flows from one 64-bit seed through
named substreams ("room/17/trajectory/0", ...). A substream's output
depends only on (seed, path), never on draw order elsewhere, so batch
jobs can run in any order or in parallel and still produce identical
results.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """Counter-based generator (Philox) keyed by seed and label path."""

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed) & _MASK64
        self.path = str(path)
        digest = hashlib.blake2b(
            self.path.encode("utf-8"),
            digest_size=16,
            key=self.seed.to_bytes(8, "little"),
        ).digest()
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(digest, "little"))
        )

    def substream(self, *labels) -> "Rng":
        """Derive an independent stream named by the given labels."""
        suffix = "/".join(str(label) for label in labels)
        path = f"{self.path}/{suffix}" if self.path else suffix
        return Rng(self.seed, path)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in the half-open range [low, high)."""
        return self._gen.integers(low, high, size)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def shuffled(self, seq) -> list:
        out = list(seq)
        self._gen.shuffle(out)
        return out

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"
