"""Portable deterministic randomness built on SplitMix64.

Every stochastic choice in the toolkit (synthetic bouts, mask plans, batch
shuffles, weight init) draws from this generator, so identical seeds give
bit-identical results across platforms and processes. Gaussians come from
Box-Muller on the SplitMix64 stream.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_BASIS = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """SplitMix64 finalizer: avalanche a 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def fnv1a64(data: bytes) -> int:
    h = _FNV_BASIS
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def derive_seed(*parts: int | str) -> int:
    """Stable 64-bit seed from a mixed list of ints and strings.

    Used to split independent substreams off a run seed, e.g.
    ``derive_seed(run_seed, "mask", bout_id, epoch)``.
    """
    h = _FNV_BASIS
    for part in parts:
        if isinstance(part, str):
            payload = b"s" + part.encode("utf-8")
        else:
            payload = b"i" + (part & MASK64).to_bytes(8, "little")
        for b in payload + b"\xff":
            h = ((h ^ b) * _FNV_PRIME) & MASK64
    return mix64(h)


class SplitMix64:
    """SplitMix64 stream with uniform, bounded-int and Gaussian draws."""

    __slots__ = ("_state", "_spare")

    def __init__(self, seed: int):
        self._state = seed & MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & MASK64
        return mix64(self._state)

    def uniform(self) -> float:
        """Uniform float64 in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def gaussian(self) -> float:
        """Standard normal via Box-Muller (one spare cached per pair)."""
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        # u1 in (0, 1] so log() stays finite
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def randbelow(self, n: int) -> int:
        """Integer in [0, n). Lemire multiply-shift; bias < n / 2**64."""
        if n <= 0:
            raise ValueError(f"randbelow needs n >= 1, got {n}")
        return (self.next_u64() * n) >> 64

    def shuffle(self, xs: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(xs) - 1, 0, -1):
            j = self.randbelow(i + 1)
            xs[i], xs[j] = xs[j], xs[i]

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices drawn uniformly from range(n), sorted."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return sorted(pool[:k])
