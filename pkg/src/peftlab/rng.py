"""Deterministic splittable random streams.

Every random choice in the lab flows from a single 64-bit config seed through
named substreams, so that corpora, initializations and shuffles are bitwise
reproducible across processes and platforms.

Stream semantics (SplitMix64):
    state_{k+1} = state_k + 0x9E3779B97F4A7C15  (mod 2^64)
    output(z)   = mix(state_{k+1})
with the standard two-round xor-multiply finalizer.  A child stream is seeded
by hashing the parent seed with a label (FNV-1a over the UTF-8 label, folded
into the parent seed and passed once through the mixer), so substreams are
independent of draw order in the parent.
"""

from __future__ import annotations

import math

_MASK = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def derive_seed(seed: int, label: str) -> int:
    """Seed for the named child stream of `seed`; order-independent."""
    return _mix((seed ^ _fnv1a(label)) & _MASK)


class SplitMix64:
    """A single SplitMix64 stream of 64-bit outputs with float/normal helpers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK
        self._spare_normal: float | None = None

    def split(self, label: str) -> "SplitMix64":
        """Independent child stream named by `label`."""
        return SplitMix64(derive_seed(self._state, label))

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def next_int(self, bound: int) -> int:
        """Uniform integer in [0, bound)."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        # Rejection sampling keeps the draw exactly uniform.
        threshold = (1 << 64) - ((1 << 64) % bound)
        while True:
            u = self.next_u64()
            if u < threshold:
                return u % bound

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def next_normal(self) -> float:
        """Standard normal via Box-Muller (deterministic, no numpy state)."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] so log() is finite.
        u1 = 1.0 - self.next_float()
        u2 = self.next_float()
        radius = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = radius * math.sin(theta)
        return radius * math.cos(theta)

    def normals(self, n: int, std: float = 1.0) -> list[float]:
        return [self.next_normal() * std for _ in range(n)]

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle driven by this stream; returns the list."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_int(i + 1)
            items[i], items[j] = items[j], items[i]
        return items
