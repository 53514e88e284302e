"""Pinned 64-bit PRNG and shuffle used for batch ordering.

Batch order must be reproducible across implementations and languages, so the
generator and the shuffle are specified here exactly rather than borrowed from
numpy:

* seeding: one 64-bit seed is expanded into the 256-bit generator state with
  four successive splitmix64 outputs,
* stream: xoshiro256** (Blackman & Vigna),
* bounded draws: rejection sampling on the top of the 64-bit range, so every
  value in ``[0, bound)`` is equally likely,
* shuffle: Fisher-Yates from the highest index downward, swapping index ``i``
  with ``j = next_below(i + 1)``.

Any reimplementation following the steps above reproduces the same
permutations bit for bit.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def _splitmix64_next(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    z = z ^ (z >> 31)
    return z, state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** seeded via splitmix64 from a single 64-bit integer."""

    def __init__(self, seed: int):
        sm = seed & _MASK64
        s = []
        for _ in range(4):
            out, sm = _splitmix64_next(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_below(self, bound: int) -> int:
        """Unbiased draw from [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = ((1 << 64) // bound) * bound
        r = self.next_u64()
        while r >= limit:
            r = self.next_u64()
        return r % bound


def fisher_yates_permutation(n: int, seed: int) -> list[int]:
    """Permutation of range(n) fully determined by (seed, n)."""
    gen = Xoshiro256StarStar(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = gen.next_below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm
