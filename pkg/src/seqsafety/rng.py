"""Deterministic random streams derived from a single master seed.

Every random quantity in the package flows from a master seed through a named
derivation path, e.g. ``RandomStream(7).child("seed", 3, "outcome", 12)``.
The path is mixed into a 64-bit key with BLAKE2b. Addressable draws (one
uniform per subject-week, say) are produced by a counter-based hash: the key
and the integer counters are folded through the SplitMix64 finalizer, so a
draw depends only on (key, counters) and never on evaluation order. That is
what makes subject-level simulation reproducible under any parallel split.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_MASK64 = (1 << 64) - 1


def splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    with np.errstate(over="ignore"):  # arithmetic is mod 2^64 by design
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> _S30)) * _MIX1
        z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def derive_key(master_seed: int, *path) -> int:
    """Mix a master seed and a derivation path into a 64-bit key."""
    text = "/".join([str(int(master_seed))] + [str(p) for p in path])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hash_uniform(key: int, *counters) -> np.ndarray:
    """Uniform(0, 1) draws addressed by integer counters (broadcast together).

    The result never hits 0 or 1 exactly, so it is safe to feed into inverse
    CDFs and logarithms.
    """
    h = np.asarray(np.uint64(key & _MASK64))
    for c in counters:
        h = splitmix64(h ^ np.asarray(c).astype(np.uint64))
    h = splitmix64(h)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class RandomStream:
    """A named position in the seed derivation tree."""

    master_seed: int
    path: tuple = ()

    def child(self, *names) -> "RandomStream":
        return RandomStream(self.master_seed, self.path + tuple(names))

    @property
    def key(self) -> int:
        return derive_key(self.master_seed, *self.path)

    def uniform(self, *counters) -> np.ndarray:
        return hash_uniform(self.key, *counters)

    def generator(self) -> np.random.Generator:
        """A sequential numpy generator for draws that need no addressing."""
        return np.random.Generator(np.random.PCG64(self.key))

    def int32_seed(self) -> int:
        return self.key & 0x7FFFFFFF
