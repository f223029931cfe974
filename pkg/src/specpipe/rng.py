"""Counter-based splittable random streams.

Draw i from a stream is a pure function of (seed, i), so any draw can be
replayed by reconstructing the stream at the same counter. Child streams are
derived by hashing a label into the parent seed without consuming any draws,
which keeps draft-side and verify-side randomness independent and replayable.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_LABEL_SALT = 0xA24BAED4963EE407

_NP_MIX1 = np.uint64(_MIX1)
_NP_MIX2 = np.uint64(_MIX2)
_NP_S30 = np.uint64(30)
_NP_S27 = np.uint64(27)
_NP_S31 = np.uint64(31)

_INV_2_53 = 2.0**-53


def mix64(x: int) -> int:
    """splitmix64 finalizer; full-avalanche permutation of a 64-bit word."""
    x &= MASK64
    x ^= x >> 30
    x = (x * _MIX1) & MASK64
    x ^= x >> 27
    x = (x * _MIX2) & MASK64
    x ^= x >> 31
    return x


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized mix64 over a uint64 array (input is not modified)."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> _NP_S30
    x *= _NP_MIX1
    x ^= x >> _NP_S27
    x *= _NP_MIX2
    x ^= x >> _NP_S31
    return x


def derive_seed(seed: int, label: int | str) -> int:
    """Derive a child seed from (seed, label); stable across runs and platforms.

    String labels are folded bytewise so the derivation does not depend on
    Python's salted hash().
    """
    h = mix64(seed ^ _LABEL_SALT)
    if isinstance(label, str):
        for b in label.encode("utf-8"):
            h = mix64(h ^ (b + 1))
    else:
        h = mix64(h ^ mix64(label & MASK64))
    return h


class RngStream:
    """A (seed, counter) uniform stream.

    uniform() returns the counter-th draw and advances the counter by exactly
    one, so equal (seed, counter) pairs always yield equal values.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & MASK64
        if counter < 0:
            raise ValueError("counter must be non-negative")
        self.counter = counter

    def uniform(self) -> float:
        """One draw in [0, 1); consumes exactly one counter step."""
        z = (self.seed + (self.counter + 1) * _GOLDEN) & MASK64
        self.counter += 1
        return (mix64(z) >> 11) * _INV_2_53

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) from a single draw."""
        if n < 1:
            raise ValueError("n must be positive")
        v = int(self.uniform() * n)
        return n - 1 if v >= n else v

    def split(self, label: int | str) -> "RngStream":
        """Child stream keyed by label; does not consume draws from self."""
        return RngStream(derive_seed(self.seed, label))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed:#018x}, counter={self.counter})"
