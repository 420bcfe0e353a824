"""Deterministic 64-bit PRNG (splitmix64) used for all randomness in the project.

Every draw is integer arithmetic on 64-bit words, so sequences are identical on
every platform. Independent streams are derived from a root seed plus a stream
id; stream derivation is itself a splitmix64 mix, so streams never overlap in
practice and reordering one stream never perturbs another.

Constants are the standard splitmix64 ones:
    GOLDEN = 0x9E3779B97F4A7C15
    MIX1   = 0xBF58476D1CE4E5B9
    MIX2   = 0x94D049BB133111EB
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """One splitmix64 output step applied to x (stateless)."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential splitmix64 generator."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def randrange(self, n: int) -> int:
        """Integer in [0, n). Plain modulo reduction; the bias of at most
        n/2**64 is irrelevant for traffic synthesis and is fully deterministic."""
        if n <= 0:
            raise ValueError("randrange needs n > 0")
        return self.next_u64() % n

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.randrange(hi - lo + 1)

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits (exact IEEE-754 semantics)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def stream(self, stream_id: int) -> "SplitMix64":
        """Child generator for an independent, deterministically derived stream."""
        return SplitMix64(mix64(self.state ^ mix64(stream_id)))


def derive_stream_seed(seed: int, stream_id: int) -> int:
    """Stateless stream derivation: mix(seed ^ mix(stream_id))."""
    return mix64((seed & MASK64) ^ mix64(stream_id))


def uniform_array(seed: int, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Vectorized splitmix64: n uniforms in [lo, hi) as float64.

    Element k equals SplitMix64(seed) advanced k+1 times, so this matches the
    sequential generator output exactly.
    """
    ks = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (np.uint64(seed) + ks * np.uint64(GOLDEN)).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        z = z ^ (z >> np.uint64(31))
    u = (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return lo + u * (hi - lo)
