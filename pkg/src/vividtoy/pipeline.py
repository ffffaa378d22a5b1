"""Backbone pretraining and control fine-tuning with v-prediction, AdamW and cosine annealing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import codec
from . import tensorcore as tc
from .dataio import DataError, read_vvt, write_vvt
from .data import Pair
from .degrade import DegradationConfig, degrade
from .net import FROZEN, TRAINABLE, ControlFlags, NetConfig, ParamStore, init_backbone, init_control, v_theta_forward
from .schedule import NoiseSchedule, add_noise, make_linear_schedule, v_target
from .seeding import derive_seed, stream

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 1
    seed: int = 0
    projector_on: bool = True
    connector_mode: str = "dual"
    distill_on: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"train.stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 1:
            raise ValueError("train.steps must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("train.learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        ControlFlags(self.projector_on, self.connector_mode)

    @property
    def flags(self) -> ControlFlags:
        return ControlFlags(self.projector_on, self.connector_mode)


def cosine_lr(step: int, total: int, peak: float) -> float:
    """Cosine annealing from ``peak`` at step 0 to 0 at ``total``, no warmup."""
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, tc.Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            dt = p.data.dtype.type
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = dt(b1) * m + dt(1 - b1) * g
            v = dt(b2) * v + dt(1 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            upd = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data = p.data - dt(lr * self.weight_decay) * p.data - dt(lr) * upd


@dataclass
class Checkpoint:
    params: ParamStore
    net: NetConfig
    schedule: NoiseSchedule
    stage: str
    step: int = 0
    optimizer: AdamW | None = None
    meta: dict = field(default_factory=dict)


def _loss_for_pair(params, pair_latent, pair_caption, z_lq, sched, net_cfg, flags, rng, control):
    z0 = pair_latent
    t = int(rng.integers(0, sched.T))
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    x_t = add_noise(z0, t, eps, sched)
    v = v_target(z0, eps, t, sched)
    pred = v_theta_forward(x_t, z_lq, pair_caption, t, params, net_cfg, flags, control=control)
    diff = pred - tc.Tensor(v)
    return tc.mean(diff * diff), t


def _check_divergence(loss: float, params: ParamStore, names: Sequence[str]) -> None:
    if math.isfinite(loss):
        return
    for n in names:
        t = params[n]
        if not np.isfinite(t.data).all():
            raise DivergenceError(f"non-finite loss {loss}; parameter {n} holds NaN/Inf")
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise DivergenceError(f"non-finite loss {loss}; gradient of {n} holds NaN/Inf")
    raise DivergenceError(f"non-finite loss {loss} (all trainable tensors finite)")


def training_step(params: ParamStore, batch: Sequence[Pair], sched: NoiseSchedule, cfg: TrainConfig,
                  net_cfg: NetConfig, opt: AdamW, step: int,
                  degrade_cfg: DegradationConfig | None = None) -> float:
    """One optimizer step on the v-prediction loss averaged over ``batch``; returns the loss."""
    control = cfg.stage == "finetune"
    names = params.names(TRAINABLE if control else FROZEN)
    params.set_trainable([TRAINABLE] if control else [FROZEN])
    dcfg = degrade_cfg or DegradationConfig()
    total = 0.0
    for k, pair in enumerate(batch):
        rng = stream(cfg.seed, "train", step, k)
        video = np.asarray(pair.video, dtype=net_cfg.np_dtype)
        z0 = codec.encode(video)
        z_lq = None
        if control:
            lq = degrade(video, dcfg, seed=derive_seed(cfg.seed, "lq", step, k))
            z_lq = codec.encode(lq.astype(net_cfg.np_dtype))
        try:
            loss, _ = _loss_for_pair(params, z0, pair.caption, z_lq, sched, net_cfg, cfg.flags, rng, control)
        except tc.NonFiniteError as e:
            # a NaN reached the forward pass; find which parameter carries it
            _check_divergence(float("nan"), params, params.names())
            raise DivergenceError(f"step {step}: {e}") from None
        if len(batch) > 1:
            loss = tc.scale(loss, 1.0 / len(batch))
        value = loss.item()
        if not math.isfinite(value):
            _check_divergence(value, params, names)
        tc.backward(loss)
        total += value
    for n in names:
        g = params[n].grad
        if g is not None and not np.isfinite(g).all():
            raise DivergenceError(f"gradient of {n} holds NaN/Inf at step {step}")
    lr = cosine_lr(step, cfg.steps, cfg.learning_rate)
    opt.step({n: params[n] for n in names}, lr)
    params.zero_grad()
    return total


def _pick_batch(pairs: Sequence[Pair], cfg: TrainConfig, step: int) -> list[Pair]:
    rng = stream(cfg.seed, "pick", step)
    return [pairs[int(i)] for i in rng.integers(0, len(pairs), size=cfg.batch_size)]


def train(ckpt: Checkpoint, pairs: Sequence[Pair], cfg: TrainConfig, degrade_cfg: DegradationConfig | None = None,
          log_fn: Callable[[dict], None] | None = None, until: int | None = None) -> Checkpoint:
    """Run steps ``ckpt.step .. until`` (default ``cfg.steps``) in place and return the checkpoint."""
    if not pairs:
        raise DataError("training set is empty")
    opt = ckpt.optimizer or AdamW(cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps)
    ckpt.optimizer = opt
    end = cfg.steps if until is None else min(until, cfg.steps)
    for step in range(ckpt.step, end):
        batch = _pick_batch(pairs, cfg, step)
        t0 = time.perf_counter()
        loss = training_step(ckpt.params, batch, ckpt.schedule, cfg, ckpt.net, opt, step, degrade_cfg)
        ckpt.step = step + 1
        if log_fn is not None:
            mix = {s: sum(p.source == s for p in batch) for s in ("real", "distilled")}
            log_fn({"step": step, "loss": loss, "lr": cosine_lr(step, cfg.steps, cfg.learning_rate),
                    "tag_mix": mix, "sec": round(time.perf_counter() - t0, 4)})
    return ckpt


def pretrain(pairs: Sequence[Pair], cfg: TrainConfig, net_cfg: NetConfig = NetConfig(),
             sched: NoiseSchedule | None = None, log_fn=None, resume: Checkpoint | None = None,
             until: int | None = None) -> Checkpoint:
    """Train the caption-conditioned backbone (no control path) from scratch or ``resume``."""
    if cfg.stage != "pretrain":
        cfg = replace(cfg, stage="pretrain")
    if resume is None:
        sched = sched or make_linear_schedule()
        resume = Checkpoint(init_backbone(net_cfg, cfg.seed), net_cfg, sched, "pretrain",
                            meta={"train": asdict(cfg)})
    return train(resume, pairs, cfg, log_fn=log_fn, until=until)


def start_finetune(backbone: Checkpoint, cfg: TrainConfig) -> Checkpoint:
    if backbone.stage != "pretrain" or backbone.params.has_control():
        raise ValueError("finetune needs a pretrained backbone checkpoint")
    params = init_control(backbone.params, backbone.net, derive_seed(cfg.seed, "control"))
    meta = {"train": asdict(cfg), "backbone_checksum": backbone.params.checksum(FROZEN)}
    return Checkpoint(params, backbone.net, backbone.schedule, "finetune", meta=meta)


def finetune(backbone: Checkpoint, pairs: Sequence[Pair], cfg: TrainConfig,
             degrade_cfg: DegradationConfig | None = None, log_fn=None, resume: Checkpoint | None = None,
             until: int | None = None) -> Checkpoint:
    """Train projector, ControlNet and connectors on top of a frozen backbone."""
    if cfg.stage != "finetune":
        cfg = replace(cfg, stage="finetune")
    if not cfg.distill_on:
        pairs = [p for p in pairs if p.source == "real"]
    ckpt = resume or start_finetune(backbone, cfg)
    ckpt.meta["degrade"] = (degrade_cfg or DegradationConfig()).to_dict()
    return train(ckpt, pairs, cfg, degrade_cfg, log_fn=log_fn, until=until)


# -- checkpoint files ---------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = {f"param/{n}": t.data for n, t in ckpt.params.tensors.items()}
    if ckpt.optimizer is not None:
        for n, a in ckpt.optimizer.m.items():
            tensors[f"opt.m/{n}"] = a
        for n, a in ckpt.optimizer.v.items():
            tensors[f"opt.v/{n}"] = a
    opt = ckpt.optimizer
    manifest = {
        "format": "vividtoy-checkpoint",
        "stage": ckpt.stage,
        "step": ckpt.step,
        "net": asdict(ckpt.net),
        "schedule": ckpt.schedule.fingerprint(),
        "partition": ckpt.params.partition,
        "optimizer": None if opt is None else {"beta1": opt.beta1, "beta2": opt.beta2,
                                               "weight_decay": opt.weight_decay, "eps": opt.eps, "t": opt.t},
        "checksums": {"frozen_backbone": ckpt.params.checksum(FROZEN),
                      "trainable_control": ckpt.params.checksum(TRAINABLE)},
        "meta": ckpt.meta,
    }
    write_vvt(path, tensors)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mp = Path(str(path) + ".json")
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    if not mp.exists():
        raise DataError(f"checkpoint manifest not found: {mp}")
    manifest = json.loads(mp.read_text(encoding="utf-8"))
    for key in ("stage", "net", "schedule", "partition"):
        if key not in manifest:
            raise DataError(f"{mp}: missing section {key!r}")
    tensors = read_vvt(path)
    params = ParamStore()
    for n, part in manifest["partition"].items():
        key = f"param/{n}"
        if key not in tensors:
            raise DataError(f"{path}: missing parameter {n}")
        params.add(n, tensors[key], part)
    sc = manifest["schedule"]
    sched = make_linear_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    opt = None
    if manifest.get("optimizer"):
        o = manifest["optimizer"]
        opt = AdamW(o["beta1"], o["beta2"], o["weight_decay"], o["eps"], o["t"])
        for k, a in tensors.items():
            if k.startswith("opt.m/"):
                opt.m[k[6:]] = a
            elif k.startswith("opt.v/"):
                opt.v[k[6:]] = a
    return Checkpoint(params, NetConfig(**manifest["net"]), sched, manifest["stage"], manifest["step"], opt,
                      manifest.get("meta", {}))
