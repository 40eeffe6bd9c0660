"""Seed derivation and counter-based keyed randomness.

Sequential randomness comes from :class:`numpy.random.Generator` streams
derived with :class:`numpy.random.SeedSequence` spawn keys, so replica ``i``
of an experiment is reproducible on its own.  Instruction stacks need random
access instead (instruction ``k`` at site ``x`` without generating the ones
before it), which is what the keyed splitmix64 hash below provides.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numba import njit, uint64

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


def make_rng(seed, *keys: int) -> np.random.Generator:
    """Generator for ``seed`` further keyed by integer ``keys`` (e.g. replica index)."""
    if isinstance(seed, np.random.Generator):
        if keys:
            raise ValueError("cannot key an existing Generator")
        return seed
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed derived from ``seed`` and ``keys``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def name_key(name: str) -> int:
    """Stable integer key for a string label (experiment ids, modes)."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


@njit(cache=True, inline="always")
def mix64(z):
    z = uint64(z)
    z = (z ^ (z >> uint64(30))) * _M1
    z = (z ^ (z >> uint64(27))) * _M2
    return z ^ (z >> uint64(31))


@njit(cache=True)
def keyed_word(seed, layer, v, y, k):
    """64-bit word for instruction ``k`` at site ``(v, y)`` in stack ``layer``."""
    h = mix64(uint64(seed) + _GOLDEN)
    h = mix64(h ^ uint64(layer))
    h = mix64(h + _GOLDEN ^ uint64(v))
    h = mix64(h ^ uint64(np.int64(y) + np.int64(1 << 40)))
    return mix64(h + _GOLDEN ^ uint64(k))


@njit(cache=True, inline="always")
def word_uniform(w):
    return float(w >> uint64(11)) * _INV53


@njit(cache=True, inline="always")
def word_below(w, n):
    """Unbiased integer in ``[0, n)`` (``n < 2**32``) from a word, re-hashing on rejection."""
    n64 = uint64(n)
    threshold = (uint64(0x100000000) - n64) % n64
    while True:
        m = (w & uint64(0xFFFFFFFF)) * n64
        if (m & uint64(0xFFFFFFFF)) >= threshold:
            return np.int64(m >> uint64(32))
        w = mix64(w + _GOLDEN)
