"""Lossless analytic latent codec: space-to-depth by ``FACTOR`` plus ``z = 2p - 1``.

Videos are arrays ``(frames, channels, height, width)`` in [0, 1]; latents are
``(frames, channels * FACTOR**2, height / FACTOR, width / FACTOR)``.
"""

from __future__ import annotations

import numpy as np

FACTOR = 2


def encode(video: np.ndarray, f: int = FACTOR) -> np.ndarray:
    v = np.asarray(video)
    if v.ndim != 4:
        raise ValueError(f"encode: expected (frames, channels, h, w), got shape {v.shape}")
    fr, c, h, w = v.shape
    if h % f or w % f:
        raise ValueError(f"encode: height {h} and width {w} must be divisible by factor f={f}")
    z = v.reshape(fr, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4).reshape(fr, c * f * f, h // f, w // f)
    return (z - v.dtype.type(0.5)) * v.dtype.type(2.0)


def decode(z: np.ndarray, f: int = FACTOR) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 4 or z.shape[1] % (f * f):
        raise ValueError(f"decode: latent shape {z.shape} inconsistent with factor f={f}")
    fr, cz, hz, wz = z.shape
    c = cz // (f * f)
    p = z * z.dtype.type(0.5) + z.dtype.type(0.5)
    v = p.reshape(fr, c, f, f, hz, wz).transpose(0, 1, 4, 2, 5, 3).reshape(fr, c, hz * f, wz * f)
    return np.clip(v, 0.0, 1.0)
