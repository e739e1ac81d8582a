"""SplitMix64, the deterministic stream every toolkit artifact derives from.

Scalar rewrite of the generator documented in docs/DATA_FORMATS.md (Vigna's
constants, 53-bit doubles, label-folded sub-streams). Draws here are bitwise
identical to the primary implementation, which is what lets the twin model
rebuild the same weights from a bare integer seed.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """Deterministic 64-bit stream; one instance per independent use."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Binary64 in [0, 1), 53 significant bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()


def derive_seed(seed: int, *labels: int) -> int:
    """Stable sub-stream seed: fold integer labels into a parent seed."""
    s = seed & MASK64
    for label in labels:
        g = SplitMix64(s ^ ((int(label) * _GAMMA) & MASK64))
        s = g.next_u64()
    return s
