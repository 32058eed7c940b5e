"""Portable seeded random stream used for splits and edge sampling.

The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit state
advanced by the golden-ratio increment ``0x9E3779B97F4A7C15`` and finalised
with the ``(30, 27, 31)`` xor-shift/multiply mix.  Bounded integers use
rejection sampling on the raw 64-bit output, so a port only needs 64-bit
wrapping arithmetic to reproduce every permutation bit for bit.

Fisher-Yates shuffle: for ``i = n-1 .. 1``, draw ``j = below(i + 1)`` and
swap positions ``i`` and ``j``.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    """SplitMix64 stream seeded with an arbitrary integer (taken mod 2**64)."""

    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)``; rejects the biased tail of 2**64."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def permutation(self, n: int) -> list[int]:
        perm = list(range(n))
        self.shuffle(perm)
        return perm

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, n: int, m: int) -> list[int]:
        """``m`` distinct indices from ``range(n)`` via a partial Fisher-Yates.

        Position ``i`` (for ``i = 0 .. m-1``) swaps with ``i + below(n - i)``;
        the first ``m`` entries are returned in draw order.
        """
        if not 0 <= m <= n:
            raise ValueError(f"cannot sample {m} of {n}")
        pool = list(range(n))
        for i in range(m):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:m]
