"""Counter-based splittable random streams.

Every random draw in the harness comes from a stream keyed by
(seed, trial_index, label).  Streams are stateless 64-bit mixing
constructions (splitmix64 finalizer over a keyed counter), so draws are
bit-identical across platforms and independent of evaluation order:
two method variants that ask for the same (trial, purpose) stream see
the same sequence, which is what makes the paired experiment design work.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """splitmix64 finalizer: a bijective avalanche mix on 64 bits."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def label_hash(label: str) -> int:
    """Stable 64-bit hash of a stream label (FNV-1a, then mixed)."""
    h = _FNV_OFFSET
    for b in label.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return mix64(h)


class Stream:
    """One deterministic random stream for a (seed, trial, purpose) triple."""

    __slots__ = ("_key", "_counter")

    def __init__(self, seed: int, trial_index: int, label: str):
        k = mix64(seed & _MASK64)
        k = mix64(k ^ mix64((trial_index * _GOLDEN) & _MASK64))
        self._key = mix64(k ^ label_hash(label))
        self._counter = 0

    def next_u64(self) -> int:
        v = mix64((self._key + (self._counter * _GOLDEN)) & _MASK64)
        self._counter += 1
        return v

    def uniform(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        threshold = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            v = self.next_u64()
            if v < threshold:
                return v % n

    def choice(self, seq):
        return seq[self.below(len(seq))]


def stream(seed: int, trial_index: int, label: str) -> Stream:
    """Factory mirroring the harness call shape rng(seed, trial_index, label)."""
    return Stream(seed, trial_index, label)
