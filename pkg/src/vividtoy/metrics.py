"""Full-reference video metrics and a temporal-consistency proxy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

PSNR_CAP = 99.0


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _box_mean(x: np.ndarray, win: int) -> np.ndarray:
    """Mean over every win x win window (stride 1) of the last two axes."""
    c = np.cumsum(np.cumsum(x, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)])
    s = c[..., win:, win:] - c[..., :-win, win:] - c[..., win:, :-win] + c[..., :-win, :-win]
    return s / (win * win)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, c1: float = 1e-4, c2: float = 9e-4) -> float:
    """Uniform-window SSIM averaged over all windows, channels and frames."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    if min(a.shape[-2:]) < window:
        raise ValueError(f"frame {a.shape[-2:]} smaller than window {window}")
    mu_a, mu_b = _box_mean(a, window), _box_mean(b, window)
    # direct windowed sums keep the statistics symmetric in (a, b)
    var_a = _box_mean(a * a, window) - mu_a * mu_a
    var_b = _box_mean(b * b, window) - mu_b * mu_b
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def temporal_consistency(out: np.ndarray, ref: np.ndarray) -> float:
    """Mean over t of the per-pixel mean |(out[t+1]-out[t]) - (ref[t+1]-ref[t])|; lower is better."""
    out = np.asarray(out, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _same_shape(out, ref)
    if out.shape[0] < 2:
        raise ValueError("temporal_consistency needs at least 2 frames")
    d = np.diff(out, axis=0) - np.diff(ref, axis=0)
    return float(np.abs(d).reshape(d.shape[0], -1).mean(axis=1).mean())


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    temporal_consistency: float
    per_frame: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def report(out: np.ndarray, ref: np.ndarray) -> MetricReport:
    frames = [{"psnr": psnr(o, r), "ssim": ssim(o, r)} for o, r in zip(out, ref)]
    tc = temporal_consistency(out, ref) if len(out) > 1 else 0.0
    return MetricReport(psnr(out, ref), ssim(out, ref), tc, frames)
