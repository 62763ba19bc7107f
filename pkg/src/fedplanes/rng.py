"""Labeled deterministic RNG streams.

Every stochastic component draws from a stream identified by (master seed,
string label), e.g. "client:3:round:17". Identical pairs reproduce the same
sequence; distinct labels give independent substreams. This keeps full runs
bit-reproducible regardless of worker scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]


class RngStream:
    """A named substream of a master seed."""

    __slots__ = ("seed", "label")

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = label

    def derive(self, *parts) -> "RngStream":
        """Child stream; parts are joined onto the label with ':'."""
        suffix = ":".join(str(p) for p in parts)
        return RngStream(self.seed, f"{self.label}:{suffix}")

    def generator(self) -> np.random.Generator:
        """Fresh generator for this stream. Same sequence on every call."""
        digest = hashlib.sha256(f"{self.seed}|{self.label}".encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 20, 4)]
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *words])
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"
