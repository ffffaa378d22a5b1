"""Noise schedule, v-prediction algebra and the deterministic sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t: int) -> float:
        """Cumulative signal retention; ``t == -1`` is the clean state."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T - 1}]")
        return float(self.alpha_bar[t])

    def fingerprint(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha_bar = np.empty(T)
    acc = 1.0
    for t in range(T):
        acc = acc * (1.0 - beta[t])
        alpha_bar[t] = acc
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, beta, alpha_bar)


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def _coef(ab: float, dtype):
    return dtype.type(np.sqrt(ab)), dtype.type(np.sqrt(1.0 - ab))


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    _same_shape("add_noise", x0, eps)
    a, s = _coef(sched.ab(t), np.asarray(x0).dtype)
    return a * x0 + s * eps


def v_target(x0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    _same_shape("v_target", x0, eps)
    a, s = _coef(sched.ab(t), np.asarray(x0).dtype)
    return a * eps - s * x0


def recover_x0(x_t: np.ndarray, v: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    _same_shape("recover_x0", x_t, v)
    a, s = _coef(sched.ab(t), np.asarray(x_t).dtype)
    return a * x_t - s * v


PredictV = Callable[[np.ndarray, int, Any], np.ndarray]


def sampler_step(predict_v: PredictV, x_t: np.ndarray, t_from: int, t_to: int, cond, sched: NoiseSchedule) -> np.ndarray:
    """One first-order deterministic step in v-parameterization."""
    if not t_to < t_from:
        raise ValueError(f"sampler_step: need t_to < t_from, got {t_to} >= {t_from}")
    v = predict_v(x_t, t_from, cond)
    x0_hat = recover_x0(x_t, v, t_from, sched)
    if t_to == -1:
        return x0_hat
    ab_from = sched.ab(t_from)
    dtype = np.asarray(x_t).dtype
    eps_hat = (x_t - dtype.type(np.sqrt(ab_from)) * x0_hat) / dtype.type(np.sqrt(1.0 - ab_from))
    a, s = _coef(sched.ab(t_to), dtype)
    return a * x0_hat + s * eps_hat


def timesteps(t_start: int, steps: int) -> list[int]:
    """``steps + 1`` strictly decreasing points from ``t_start`` to -1 with uniform integer stride."""
    if steps < 1 or steps > t_start + 1:
        raise ValueError(f"steps must be in [1, {t_start + 1}], got {steps}")
    return [t_start - (k * (t_start + 1)) // steps for k in range(steps + 1)]


def sample(predict_v: PredictV, x_start: np.ndarray, t_start: int, steps: int, cond, sched: NoiseSchedule) -> np.ndarray:
    ts = timesteps(t_start, steps)
    x = x_start
    for t_from, t_to in zip(ts[:-1], ts[1:]):
        x = sampler_step(predict_v, x, t_from, t_to, cond, sched)
    return x
