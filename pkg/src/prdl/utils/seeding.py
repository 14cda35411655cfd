"""
Deterministic random stream derivation.

Every stochastic component receives a ``numpy.random.Generator`` derived from
a root seed plus identifying keys (step, image index, bag id, call counter),
so results do not depend on scheduling or thread count.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"Seed keys must be non-negative, got {key}")
    return int(key)


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Independent generator for (seed, *keys)."""
    entropy = [key_to_int(seed)] + [key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def draw_seed(rng: np.random.Generator) -> int:
    """Draw a child seed from a generator."""
    return int(rng.integers(0, 2**63 - 1))
