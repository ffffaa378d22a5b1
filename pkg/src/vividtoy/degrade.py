"""Synthetic degradation: blur -> bilinear downscale -> Gaussian noise -> quantization -> upscale."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .seeding import stream

SIGMA_BOUNDS = (0.2, 3.0)
SCALE_BOUNDS = (1.0, 4.0)
NOISE_BOUNDS = (0.0, 0.1)
LEVEL_BOUNDS = (8, 64)


@dataclass(frozen=True)
class DegradationConfig:
    """Sampling ranges for one degradation pass.

    ``blur_sigma == (0, 0)`` disables blur and ``levels is None`` disables
    quantization; every other range must sit inside the module bounds.
    """

    blur_sigma: tuple[float, float] = (0.5, 1.5)
    scale: tuple[float, float] = (2.0, 4.0)
    noise_sigma: tuple[float, float] = (0.02, 0.06)
    levels: tuple[int, int] | None = (16, 64)
    second_order: bool = False
    seed: int = 0

    def __post_init__(self):
        def check(name, rng, bounds, allow_zero=False):
            lo, hi = rng
            if lo > hi:
                raise ValueError(f"degrade.{name}: empty range {rng}")
            if allow_zero and lo == hi == 0:
                return
            if lo < bounds[0] or hi > bounds[1]:
                raise ValueError(f"degrade.{name}: range {rng} outside bounds {bounds}")

        check("blur_sigma", self.blur_sigma, SIGMA_BOUNDS, allow_zero=True)
        check("scale", self.scale, SCALE_BOUNDS)
        check("noise_sigma", self.noise_sigma, NOISE_BOUNDS)
        if self.levels is not None:
            check("levels", self.levels, LEVEL_BOUNDS)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        d = dict(d)
        for k in ("blur_sigma", "scale", "noise_sigma"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("levels") is not None:
            d["levels"] = tuple(d["levels"])
        return cls(**d)


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _conv_axis(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    n = a.shape[axis]
    idx = np.abs(np.arange(-r, n + r))
    # reflect (without edge repeat), folding again for kernels wider than the frame
    period = 2 * (n - 1) if n > 1 else 1
    idx = idx % period if n > 1 else np.zeros_like(idx)
    idx = np.where(idx > n - 1, period - idx, idx)
    padded = np.take(a, idx, axis=axis)
    out = np.zeros_like(a, dtype=np.float64)
    for i, w in enumerate(k):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i, i + n)
        out += w * padded[tuple(sl)]
    return out


def gaussian_blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur over the last two axes with reflect padding; sigma 0 is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.array(frame, copy=True)
    k = gaussian_kernel(sigma)
    out = _conv_axis(np.asarray(frame, dtype=np.float64), k, -1)
    return _conv_axis(out, k, -2).astype(np.asarray(frame).dtype)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear weights with half-pixel centers; the identity when sizes match."""
    m = np.zeros((n_out, n_in))
    if n_out == n_in:
        np.fill_diagonal(m, 1.0)
        return m
    s = n_in / n_out
    for i in range(n_out):
        x = (i + 0.5) * s - 0.5
        x = min(max(x, 0.0), n_in - 1)
        x0 = int(math.floor(x))
        x1 = min(x0 + 1, n_in - 1)
        f = x - x0
        m[i, x0] += 1 - f
        m[i, x1] += f
    return m


def resize(frames: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of ``(..., H, W)`` to ``(..., h, w)``."""
    H, W = frames.shape[-2:]
    if (H, W) == (h, w):
        return np.array(frames, copy=True)
    mh, mw = _interp_matrix(h, H), _interp_matrix(w, W)
    return (mh @ np.asarray(frames, dtype=np.float64) @ mw.T).astype(frames.dtype)


def _one_pass(v: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator) -> np.ndarray:
    F, C, H, W = v.shape
    sigma = rng.uniform(*cfg.blur_sigma)
    s = rng.uniform(*cfg.scale)
    noise = rng.uniform(*cfg.noise_sigma)
    levels = int(rng.integers(cfg.levels[0], cfg.levels[1] + 1)) if cfg.levels is not None else None
    out = gaussian_blur(v, sigma) if sigma > 0 else v
    h, w = max(1, round(H / s)), max(1, round(W / s))
    out = resize(out, h, w)
    if noise > 0:
        out = out + rng.standard_normal(out.shape) * noise
    out = np.clip(out, 0.0, 1.0)
    if levels is not None:
        out = np.round(out * (levels - 1)) / (levels - 1)
    out = resize(out, H, W)
    return np.clip(out, 0.0, 1.0).astype(v.dtype)


def degrade(video: np.ndarray, cfg: DegradationConfig, seed: int | None = None) -> np.ndarray:
    """Degrade a ``(frames, channels, h, w)`` clip; parameters are drawn once per clip."""
    rng = stream(cfg.seed if seed is None else seed, "degrade")
    out = _one_pass(np.asarray(video), cfg, rng)
    if cfg.second_order:
        out = _one_pass(out, cfg, rng)
    return out
