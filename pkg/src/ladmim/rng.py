"""Deterministic, stream-separated random number generation.

All randomness in the package flows through named Philox streams so that,
e.g., changing the masking seed never perturbs weight initialization.
Philox is counter-based: the same (seed, stream, index) triple yields the
same values on every platform.
"""

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return a generator for the given (seed, stream name, draw index).

    `index` selects a disjoint counter block, so per-item generators
    (one per image, one per mask, ...) are independent and reproducible
    regardless of evaluation order.
    """
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(_stream_key(name))])
    counter = np.array([np.uint64(index), np.uint64(0), np.uint64(0), np.uint64(0)])
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def truncated_normal(gen: np.random.Generator, shape, std=0.02, clip=2.0, dtype=np.float32):
    """Normal(0, std) with values beyond `clip` standard deviations resampled."""
    x = gen.standard_normal(shape)
    bad = np.abs(x) > clip
    while bad.any():
        x[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(x) > clip
    return (x * std).astype(dtype)
