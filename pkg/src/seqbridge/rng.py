"""Deterministic counter-based random number generation.

Every draw is a pure function of (seed, counter), computed with fixed-width
64-bit integer arithmetic (a SplitMix64 stream), so identical states yield
identical sequences on every platform. Bulk draws are vectorized with
numpy uint64 arithmetic; the scalar path exists as an independent
cross-check for tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GOLDEN = np.uint64(_GOLDEN)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_INV_2_53 = float(2.0**-53)


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a plain Python integer."""
    x &= _MASK
    x ^= x >> 30
    x = (x * _MIX1) & _MASK
    x ^= x >> 27
    x = (x * _MIX2) & _MASK
    x ^= x >> 31
    return x


def hash_bytes(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes; used for parameter digests."""
    h = 0xCBF29CE484222325
    prime = 0x100000001B3
    mask = _MASK
    for b in data:
        h = ((h ^ b) * prime) & mask
    return h


def hash_string(text: str) -> int:
    """64-bit FNV-1a of a UTF-8 string; stable across platforms and runs."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & _MASK
    return h


@dataclass
class RngState:
    """Counter-based generator state. Draws advance only the counter."""

    seed: int
    counter: int = field(default=0)

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words as a uint64 array."""
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        x = (np.uint64(self.seed & _MASK) + (idx + np.uint64(1)) * _U_GOLDEN)
        x ^= x >> np.uint64(30)
        x *= _U_MIX1
        x ^= x >> np.uint64(27)
        x *= _U_MIX2
        x ^= x >> np.uint64(31)
        return x

    def raw_scalar(self) -> int:
        """One word via pure Python integers. Mirror of raw(); test oracle."""
        self.counter += 1
        return mix64((self.seed + self.counter * _GOLDEN) & _MASK)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return low + u * (high - low)

    def normal(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        """Box-Muller pairs; deterministic, no rejection."""
        n = rows * cols
        half = (n + 1) // 2
        w = self.raw(2 * half)
        u1 = ((w[:half] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (w[half:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (std * z).reshape(rows, cols)

    def randint(self, low: int, high: int, n: int = 1) -> np.ndarray:
        """Integers in [low, high); uniform up to 2**-53 rounding."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        vals = low + np.floor(u * (high - low)).astype(np.int64)
        return np.minimum(vals, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")

    def choice(self, seq, n: int = 1) -> list:
        idx = self.randint(0, len(seq), n)
        return [seq[int(i)] for i in idx]

    def split(self, tag: str) -> "RngState":
        """Independent child stream derived from the seed and a text tag."""
        return RngState(seed=mix64(self.seed ^ hash_string(tag)))
