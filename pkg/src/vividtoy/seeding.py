"""Splittable counter-based randomness.

Every random stream is a Philox generator keyed by a ``SeedSequence`` whose
entropy is the run's 64-bit seed and whose spawn key is a path of labels, so
``stream(seed, "train", 17)`` is the same stream in every process and
independent of every other path.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode("utf-8"))
    x = int(x)
    if x < 0:
        raise ValueError(f"stream labels must be non-negative, got {x}")
    return x  # SeedSequence folds wide integers itself, so 64-bit labels stay distinct


def stream(seed: int, *path) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_label(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *path) -> int:
    """A child 64-bit seed, e.g. the per-tile seed derived from (seed, row, col)."""
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_label(p) for p in path))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
