"""Concept distillation: re-denoise partially noised clips with the backbone conditioned on their captions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import codec
from .data import Pair
from .net import ControlFlags, v_theta_forward
from .pipeline import Checkpoint
from .schedule import add_noise, sample
from .seeding import derive_seed, stream


@dataclass(frozen=True)
class DistillConfig:
    t_star: int | None = None  # None means T // 2
    denoise_steps: int = 25
    blend_real: int = 5
    blend_distilled: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.denoise_steps < 1:
            raise ValueError("distill.denoise_steps must be >= 1")
        if self.blend_real < 0 or self.blend_distilled < 0 or self.blend_real + self.blend_distilled == 0:
            raise ValueError("distill blend ratio must be non-negative and not 0:0")
        if self.blend_distilled and not self.blend_real:
            raise ValueError("distill blend needs a positive real share")

    def resolve_t_star(self, T: int) -> int:
        t = T // 2 if self.t_star is None else self.t_star
        if not 0 <= t < T:
            raise ValueError(f"distill.t_star {t} outside [0, {T - 1}]")
        if self.denoise_steps > t + 1:
            raise ValueError(f"distill.denoise_steps {self.denoise_steps} exceeds t_star + 1 = {t + 1}")
        return t


def _backbone_predictor(ckpt: Checkpoint):
    # finetune checkpoints always wrap a pretrained backbone; the control path is bypassed
    if ckpt.stage == "pretrain" and ckpt.step < 1:
        raise ValueError("distillation needs a pretrained backbone (checkpoint has 0 training steps)")
    params, cfg = ckpt.params, ckpt.net
    params.set_trainable([])

    def predict(x, t, caption):
        return v_theta_forward(x, None, caption, t, params, cfg, ControlFlags(), control=False).data

    return predict


def distill_latent(z0: np.ndarray, caption, predict_v, sched, t_star: int, steps: int, seed: int) -> np.ndarray:
    eps = stream(seed, "distill", "eps").standard_normal(z0.shape).astype(z0.dtype)
    z_t = add_noise(z0, t_star, eps, sched)
    return sample(predict_v, z_t, t_star, steps, caption, sched)


def distill_sample(backbone: Checkpoint, video: np.ndarray, caption, cfg: DistillConfig, seed: int,
                   predict_v=None) -> np.ndarray:
    """encode -> noise to t_star -> sample back to t = -1 with the text-conditioned backbone -> decode."""
    t_star = cfg.resolve_t_star(backbone.schedule.T)
    predict_v = predict_v or _backbone_predictor(backbone)
    z0 = codec.encode(np.asarray(video, dtype=backbone.net.np_dtype))
    z = distill_latent(z0, caption, predict_v, backbone.schedule, t_star, cfg.denoise_steps, seed)
    return codec.decode(z).astype(np.asarray(video).dtype)


def distilled_count(n_real: int, cfg: DistillConfig) -> int:
    if cfg.blend_distilled == 0:
        return 0
    return math.ceil(Fraction(n_real * cfg.blend_distilled, cfg.blend_real))


def build_distilled_set(backbone: Checkpoint, pairs: Sequence[Pair], cfg: DistillConfig) -> list[Pair]:
    """Append ceil(|pairs| * distilled / real) distilled pairs, each keeping its source caption."""
    if not pairs:
        raise ValueError("build_distilled_set needs a non-empty dataset")
    n = distilled_count(len(pairs), cfg)
    out = list(pairs)
    if n == 0:
        return out
    predict_v = _backbone_predictor(backbone)
    rng = stream(cfg.seed, "distill", "pick")
    picks = rng.choice(len(pairs), size=n, replace=n > len(pairs))
    for k, i in enumerate(picks):
        src = pairs[int(i)]
        seed = derive_seed(cfg.seed, "distill", k)
        video = distill_sample(backbone, src.video, src.caption, cfg, seed, predict_v)
        out.append(Pair(f"distilled-{k}-{src.id}", video, src.caption.copy(), "distilled", seed,
                        {"source_id": src.id}))
    return out


def latent_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))
