"""Named, splittable random streams on top of the Philox counter-based PRNG.

Every source of randomness in the package flows through :class:`Rng`. A
stream is identified by ``(seed, name)``; the 128-bit Philox key is derived
from that pair with SHA-256, so streams are independent, reproducible across
platforms, and insensitive to draw counts in unrelated streams. Child
streams (``split``) extend the name path, which lets e.g. per-frame
generation draw from ``world/frame/17`` without consuming the parent stream.

Normal variates are produced by an explicit Box-Muller transform over the
Philox uniform doubles rather than the ziggurat sampler, so the byte-level
sequence depends only on this module and the Philox bit stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(seed: int, stream: str) -> np.ndarray:
    # Philox-4x64 takes a 2-word (128-bit) key; use the digest's first half.
    digest = hashlib.sha256(f"{seed}:{stream}".encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class Rng:
    """One named random stream.

    All draws reduce to ``Generator.random()`` uniform doubles in [0, 1)
    from a Philox bit generator keyed by ``sha256(f"{seed}:{stream}")``.
    """

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream = str(stream)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.stream)))

    def split(self, name: str | int) -> "Rng":
        """Independent child stream ``<stream>/<name>``; the parent is untouched."""
        return Rng(self.seed, f"{self.stream}/{name}")

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size=None):
        """Standard normal draws via Box-Muller: sqrt(-2 ln u1) * cos(2 pi u2)."""
        if size is None:
            return float(self.normal(size=1)[0])
        n = int(np.prod(size))
        u1 = self._gen.random(n)
        u2 = self._gen.random(n)
        # Guard u1 = 0, which Generator.random can emit; log(0) is -inf.
        u1 = np.maximum(u1, np.finfo(np.float64).tiny)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(size)

    def integers(self, n: int, size=None):
        """Uniform integers in [0, n) derived from uniform doubles."""
        if n <= 0:
            raise ValueError("integers() requires n >= 1")
        u = np.asarray(self._gen.random(size))
        out = np.minimum((u * n).astype(np.int64), n - 1)
        return out if size is not None else int(out)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n) driven by uniform doubles."""
        order = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, stream={self.stream!r})"
