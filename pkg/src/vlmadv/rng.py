"""Deterministic random number generation.

Everything random in this toolkit (toy-model weights, dataset subsampling,
random attack starts, fuzz payloads) is drawn from SplitMix64, chosen because
it is trivial to reimplement bit-exactly in any language with 64-bit integer
arithmetic. The algorithm is Vigna's reference splitmix64: a 64-bit counter
advanced by the golden-ratio increment, finalized by two xor-multiply rounds.
Floats are derived as ``(x >> 11) * 2**-53`` (the upper 53 bits), bounded
integers by rejection sampling on the modulus, so every consumer of a seed is
reproducible across platforms and implementations. The exact derivations are
documented in docs/DATA_FORMATS.md.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """SplitMix64 stream seeded with a 64-bit integer."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float64 in [0, 1): the top 53 bits scaled by 2**-53."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) via modulus rejection."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def choice(self, seq):
        return seq[self.below(len(seq))]

    def sample_indices(self, size: int, k: int) -> list[int]:
        """Draw-ordered sample of k distinct indices from range(size).

        Partial Fisher-Yates: at step i swap position i with a position in
        [i, size); the first k entries, in draw order, are the sample.
        """
        if k > size:
            raise ValueError("sample larger than population")
        idx = list(range(size))
        for i in range(k):
            j = i + self.below(size - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]


def derive_seed(seed: int, *labels: int) -> int:
    """Stable sub-stream seed: fold integer labels into a parent seed.

    Each label advances an independent SplitMix64 step so that e.g.
    (run seed, sample index, attack index) yields uncorrelated streams.
    """
    s = seed & MASK64
    for label in labels:
        g = SplitMix64(s ^ ((label * _GAMMA) & MASK64))
        s = g.next_u64()
    return s
