"""Toy DiT backbone, ControlNet branch, control feature projector and connectors.

Tensors are token matrices ``(L, hidden)``; latents are ``(frames, channels, h, w)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .seeding import stream
from .tensorcore import Tensor

FROZEN = "frozen_backbone"
TRAINABLE = "trainable_control"
CONNECTOR_MODES = ("dual", "mlp_only", "ca_only")
PAD_ID = 0


@dataclass(frozen=True)
class NetConfig:
    N: int = 12
    hidden_dim: int = 64
    heads: int = 4
    patch: int = 2
    patch_t: int = 1
    latent_channels: int = 12
    caption_vocab: int = 64
    max_caption: int = 8
    mlp_ratio: int = 4
    projector_channels: int = 32
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.N < 6 or self.N % 6:
            raise ValueError(f"N must be a positive multiple of 6, got {self.N}")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even")
        if self.patch_t != 1:
            raise ValueError("only temporal patch size 1 is supported")

    @property
    def control_blocks(self) -> int:
        return self.N // 6

    @property
    def patch_dim(self) -> int:
        return self.latent_channels * self.patch * self.patch

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class ControlFlags:
    projector_on: bool = True
    connector_mode: str = "dual"

    def __post_init__(self):
        if self.connector_mode not in CONNECTOR_MODES:
            raise ValueError(f"connector_mode must be one of {CONNECTOR_MODES}, got {self.connector_mode!r}")


@dataclass
class VisualTokens:
    tokens: Tensor
    grid: tuple[int, int, int]  # (frames, rows, cols) of the patch grid


class ParamStore:
    """Named parameter tensors, each tagged frozen_backbone or trainable_control."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.partition: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, partition: str) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        if partition not in (FROZEN, TRAINABLE):
            raise ValueError(f"unknown partition {partition!r}")
        self.tensors[name] = Tensor(np.array(value))
        self.partition[name] = partition

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self, partition: str | None = None) -> list[str]:
        return [n for n in self.tensors if partition is None or self.partition[n] == partition]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def set_trainable(self, partitions: Iterable[str]) -> None:
        keep = set(partitions)
        for n, t in self.tensors.items():
            t.requires_grad = self.partition[n] in keep
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def checksum(self, partition: str | None = None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.names(partition)):
            a = np.ascontiguousarray(self.tensors[n].data)
            h.update(n.encode())
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, t in self.tensors.items():
            out.add(n, t.data.copy(), self.partition[n])
        return out

    def has_control(self) -> bool:
        return any(n.startswith("ctrl.") for n in self.tensors)


# -- initialization ----------------------------------------------------------

def _linear(rng, fan_in, fan_out, dtype, std=None):
    std = fan_in ** -0.5 if std is None else std
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


def _block_params(cfg: NetConfig, rng) -> dict[str, np.ndarray]:
    h, dt = cfg.hidden_dim, cfg.np_dtype
    out_std = h ** -0.5 / np.sqrt(2 * cfg.N)
    hm = h * cfg.mlp_ratio
    return {
        "attn.q": _linear(rng, h, h, dt),
        "attn.k": _linear(rng, h, h, dt),
        "attn.v": _linear(rng, h, h, dt),
        "attn.o": _linear(rng, h, h, dt, out_std),
        "attn.ob": np.zeros(h, dt),
        "xattn.q": _linear(rng, h, h, dt),
        "xattn.k": _linear(rng, h, h, dt),
        "xattn.v": _linear(rng, h, h, dt),
        "xattn.o": _linear(rng, h, h, dt, out_std),
        "xattn.ob": np.zeros(h, dt),
        "mlp.w1": _linear(rng, h, hm, dt),
        "mlp.b1": np.zeros(hm, dt),
        "mlp.w2": _linear(rng, hm, h, dt, hm ** -0.5 / np.sqrt(2 * cfg.N)),
        "mlp.b2": np.zeros(h, dt),
    }


def init_backbone(cfg: NetConfig, seed: int) -> ParamStore:
    rng = stream(seed, "init", "backbone")
    h, dt = cfg.hidden_dim, cfg.np_dtype
    ps = ParamStore()
    ps.add("embed.w", _linear(rng, cfg.patch_dim, h, dt), FROZEN)
    ps.add("embed.b", np.zeros(h, dt), FROZEN)
    ps.add("time.w1", _linear(rng, h, h, dt), FROZEN)
    ps.add("time.b1", np.zeros(h, dt), FROZEN)
    ps.add("time.w2", _linear(rng, h, h, dt), FROZEN)
    ps.add("time.b2", np.zeros(h, dt), FROZEN)
    ps.add("caption.table", (rng.standard_normal((cfg.caption_vocab, h))).astype(dt), FROZEN)
    for i in range(cfg.N):
        for k, v in _block_params(cfg, rng).items():
            ps.add(f"block{i}.{k}", v, FROZEN)
    ps.add("head.w", _linear(rng, h, cfg.patch_dim, dt, 0.02), FROZEN)
    ps.add("head.b", np.zeros(cfg.patch_dim, dt), FROZEN)
    return ps


def controlnet_init_from_dit(params: ParamStore, cfg: NetConfig) -> ParamStore:
    """Return a copy of ``params`` with ControlNet blocks deep-copied from the first N/6 DiT blocks."""
    out = params.copy()
    for k in range(cfg.control_blocks):
        src = [n for n in params.names() if n.startswith(f"block{k}.")]
        if not src:
            raise KeyError(f"missing backbone weights for block{k}")
        for n in src:
            out.add("ctrl." + n, params[n].data.copy(), TRAINABLE)
    return out


def init_control(params: ParamStore, cfg: NetConfig, seed: int) -> ParamStore:
    """Attach ControlNet, projector and connectors to a pretrained backbone.

    The projector's output conv and each connector's final MLP layer and
    cross-attention output projection start at zero, so the full model
    reproduces the backbone exactly.
    """
    missing = [n for n in ("embed.w", "head.w", "block0.attn.q") if n not in params]
    if missing:
        raise KeyError(f"backbone checkpoint lacks {missing}")
    ps = controlnet_init_from_dit(params, cfg)
    rng = stream(seed, "init", "control")
    h, dt, C = cfg.hidden_dim, cfg.np_dtype, cfg.projector_channels
    lc = cfg.latent_channels
    ps.add("ctrl.in.w", _linear(rng, cfg.patch_dim, h, dt), TRAINABLE)
    ps.add("ctrl.in.b", np.zeros(h, dt), TRAINABLE)

    def conv(cout, cin, k):
        fan = cin * int(np.prod(k))
        return (rng.standard_normal((cout, cin, *k)) * fan ** -0.5).astype(dt)

    ps.add("proj.in.w", conv(C, lc, (1, 1, 1)), TRAINABLE)
    ps.add("proj.in.b", np.zeros(C, dt), TRAINABLE)
    for b in range(3):
        ps.add(f"proj.block{b}.s.w", conv(C, C, (1, 3, 3)), TRAINABLE)
        ps.add(f"proj.block{b}.s.b", np.zeros(C, dt), TRAINABLE)
        ps.add(f"proj.block{b}.t.w", conv(C, C, (3, 1, 1)) * dt.type(0.5), TRAINABLE)
        ps.add(f"proj.block{b}.t.b", np.zeros(C, dt), TRAINABLE)
    ps.add("proj.out.w", np.zeros((lc, C, 1, 1, 1), dt), TRAINABLE)
    ps.add("proj.out.b", np.zeros(lc, dt), TRAINABLE)
    for i in range(cfg.N):
        ps.add(f"conn{i}.mlp.w1", _linear(rng, h, h, dt), TRAINABLE)
        ps.add(f"conn{i}.mlp.b1", np.zeros(h, dt), TRAINABLE)
        ps.add(f"conn{i}.mlp.w2", np.zeros((h, h), dt), TRAINABLE)
        ps.add(f"conn{i}.mlp.b2", np.zeros(h, dt), TRAINABLE)
        ps.add(f"conn{i}.ca.q", _linear(rng, h, h, dt), TRAINABLE)
        ps.add(f"conn{i}.ca.k", _linear(rng, h, h, dt), TRAINABLE)
        ps.add(f"conn{i}.ca.v", _linear(rng, h, h, dt), TRAINABLE)
        ps.add(f"conn{i}.ca.o", np.zeros((h, h), dt), TRAINABLE)
        ps.add(f"conn{i}.ca.ob", np.zeros(h, dt), TRAINABLE)
    return ps


# -- token plumbing ------------------------------------------------------------

def patchify(z, cfg: NetConfig) -> VisualTokens:
    """Latent (F, C, H, W) -> tokens (F*(H/p)*(W/p), C*p*p), frame-major then row-major."""
    z = tc.as_tensor(z)
    F, C, H, W = z.shape
    p = cfg.patch
    if H % p or W % p:
        raise ValueError(f"patchify: latent grid {H}x{W} not divisible by patch {p}")
    r, c = H // p, W // p
    t = z.reshape(F, C, r, p, c, p).permute(0, 2, 4, 1, 3, 5).reshape(F * r * c, C * p * p)
    return VisualTokens(t, (F, r, c))


def unpatchify(vt: VisualTokens, cfg: NetConfig) -> Tensor:
    F, r, c = vt.grid
    p = cfg.patch
    C = vt.tokens.shape[1] // (p * p)
    return vt.tokens.reshape(F, r, c, C, p, p).permute(0, 3, 1, 4, 2, 5).reshape(F, C, r * p, c * p)


def sinusoid(pos: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved [sin(p w_0), cos(p w_0), sin(p w_1), ...] with w_k = 10000^(-2k/dim)."""
    k = np.arange(dim // 2)
    freqs = 10000.0 ** (-2.0 * k / dim)
    ang = np.asarray(pos, dtype=np.float64)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


_POS_CACHE: dict = {}


def position_embedding(grid: tuple[int, int, int], dim: int, dtype) -> np.ndarray:
    key = (grid, dim, np.dtype(dtype).str)
    if key not in _POS_CACHE:
        F, r, c = grid
        dr = 2 * (dim // 6)
        df = dim - 2 * dr
        ff, rr, cc = np.meshgrid(np.arange(F), np.arange(r), np.arange(c), indexing="ij")
        pe = np.concatenate(
            [sinusoid(ff.ravel(), df), sinusoid(rr.ravel(), dr), sinusoid(cc.ravel(), dr)], axis=-1
        ).astype(dtype)
        pe.setflags(write=False)
        _POS_CACHE[key] = pe
    return _POS_CACHE[key]


def timestep_features(t: int, dim: int) -> np.ndarray:
    return sinusoid(np.array(float(t)), dim)


def timestep_embed(t: int, params: ParamStore, cfg: NetConfig) -> Tensor:
    s = Tensor(timestep_features(t, cfg.hidden_dim).astype(cfg.np_dtype)[None, :])
    h = tc.gelu(s @ params["time.w1"] + params["time.b1"])
    return h @ params["time.w2"] + params["time.b2"]


def caption_context(caption: Sequence[int], params: ParamStore, cfg: NetConfig) -> tuple[Tensor, np.ndarray]:
    ids = np.asarray(caption, dtype=np.int64)
    if ids.ndim != 1 or len(ids) > cfg.max_caption:
        raise ValueError(f"caption must be 1-D with at most {cfg.max_caption} ids, got shape {ids.shape}")
    if ids.size and ids.max() >= cfg.caption_vocab:
        raise ValueError(f"caption id {ids.max()} >= vocab size {cfg.caption_vocab}")
    mask = ids != PAD_ID
    if not mask.any():
        # an empty caption still attends somewhere: the pad slot acts as a null token
        mask = np.zeros_like(mask)
        mask[0] = True
    ctx = tc.embed_lookup(params["caption.table"], ids)
    return ctx, mask


# -- layers --------------------------------------------------------------------

def attention(xq: Tensor, xkv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, bo: Tensor,
              heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    Lq, h = xq.shape
    Lk = xkv.shape[0]
    dh = h // heads
    q = tc.scale(xq @ wq, dh ** -0.5).reshape(Lq, heads, dh).permute(1, 0, 2)
    k = (xkv @ wk).reshape(Lk, heads, dh).permute(1, 2, 0)
    v = (xkv @ wv).reshape(Lk, heads, dh).permute(1, 0, 2)
    s = q @ k
    if key_mask is None:
        a = tc.softmax(s, axis=-1)
    else:
        a = tc.masked_softmax(s, np.broadcast_to(key_mask, s.shape), axis=-1)
    o = (a @ v).permute(1, 0, 2).reshape(Lq, h)
    return o @ wo + bo


def dit_block(x: Tensor, ctx: Tensor, mask: np.ndarray, params: ParamStore, prefix: str, cfg: NetConfig) -> Tensor:
    P = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    eps = cfg.ln_eps
    hn = tc.layer_norm(x, eps)
    x = x + attention(hn, hn, P("attn.q"), P("attn.k"), P("attn.v"), P("attn.o"), P("attn.ob"), cfg.heads)
    hn = tc.layer_norm(x, eps)
    x = x + attention(hn, ctx, P("xattn.q"), P("xattn.k"), P("xattn.v"), P("xattn.o"), P("xattn.ob"), cfg.heads, mask)
    hn = tc.layer_norm(x, eps)
    m = tc.gelu(hn @ P("mlp.w1") + P("mlp.b1")) @ P("mlp.w2") + P("mlp.b2")
    return x + m


def connector_addend(x_i: Tensor, c_j: Tensor, params: ParamStore, i: int, mode: str, cfg: NetConfig) -> Tensor:
    """MLP(c) + CA(x, c) for connector ``i``; the branch dropped by ``mode`` is never evaluated."""
    if x_i.shape != c_j.shape:
        raise ValueError(f"connector {i}: token shapes differ {x_i.shape} vs {c_j.shape}")
    P = lambda k: params[f"conn{i}.{k}"]  # noqa: E731
    eps = cfg.ln_eps
    terms = []
    cn = tc.layer_norm(c_j, eps)
    if mode in ("dual", "mlp_only"):
        terms.append(tc.gelu(cn @ P("mlp.w1") + P("mlp.b1")) @ P("mlp.w2") + P("mlp.b2"))
    if mode in ("dual", "ca_only"):
        xn = tc.layer_norm(x_i, eps)
        terms.append(attention(xn, cn, P("ca.q"), P("ca.k"), P("ca.v"), P("ca.o"), P("ca.ob"), cfg.heads))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def connector_fuse(x_i, c_j, params: ParamStore, i: int, mode: str, cfg: NetConfig) -> Tensor:
    x_i, c_j = tc.as_tensor(x_i), tc.as_tensor(c_j)
    return x_i + connector_addend(x_i, c_j, params, i, mode, cfg)


Injection = Tensor | Callable[[Tensor], Tensor] | None


def dit_forward(tokens: Tensor, ctx: Tensor, mask: np.ndarray, t_embed: Tensor, params: ParamStore,
                cfg: NetConfig, injected: Sequence[Injection] | None = None, prefix: str = "block",
                blocks: int | None = None, head: bool = True) -> Tensor | list[Tensor]:
    """Run DiT blocks over embedded tokens.

    ``injected[i]`` is added to the output of block ``i``: a tensor, or a callable
    of the block output (the connector path). With ``head=False`` the per-block
    outputs are returned instead of the projected prediction.
    """
    n = cfg.N if blocks is None else blocks
    if injected is None:
        injected = [None] * n
    if len(injected) != n:
        raise ValueError(f"dit_forward: expected {n} injected entries, got {len(injected)}")
    x = tokens + t_embed
    outs = []
    for i in range(n):
        x = dit_block(x, ctx, mask, params, f"{prefix}{i}", cfg)
        inj = injected[i]
        if inj is not None:
            x = x + (inj(x) if callable(inj) else inj)
        outs.append(x)
    if not head:
        return outs
    hn = tc.layer_norm(x, cfg.ln_eps)
    return hn @ params["head.w"] + params["head.b"]


def control_projector(z_lq, params: ParamStore, cfg: NetConfig) -> Tensor:
    """Three spatiotemporal residual blocks; identity at init via the zero output conv."""
    z = tc.as_tensor(z_lq)
    x = z.permute(1, 0, 2, 3)  # (C, F, H, W)
    P = lambda k: params[f"proj.{k}"]  # noqa: E731
    h = tc.conv3d(x, P("in.w"), P("in.b"))
    for b in range(3):
        r = tc.gelu(tc.conv3d(h, P(f"block{b}.s.w"), P(f"block{b}.s.b"), padding=(0, 1, 1), pad_mode="reflect"))
        r = tc.conv3d(r, P(f"block{b}.t.w"), P(f"block{b}.t.b"), padding=(1, 0, 0), pad_mode="reflect")
        h = h + tc.gelu(r)
    out = tc.conv3d(h, P("out.w"), P("out.b"))
    return z + out.permute(1, 0, 2, 3)


def embed_tokens(z, params: ParamStore, cfg: NetConfig) -> VisualTokens:
    vt = patchify(z, cfg)
    pe = position_embedding(vt.grid, cfg.hidden_dim, cfg.np_dtype)
    tok = vt.tokens @ params["embed.w"] + params["embed.b"] + Tensor(pe)
    return VisualTokens(tok, vt.grid)


def v_theta_forward(x_t, z_lq, caption, t: int, params: ParamStore, cfg: NetConfig,
                    flags: ControlFlags = ControlFlags(), control: bool | None = None) -> Tensor:
    """Full v-prediction network. Without control parameters (or ``control=False``) this is the plain backbone."""
    dt = cfg.np_dtype
    x_t = tc.as_tensor(np.asarray(x_t, dtype=dt)) if not isinstance(x_t, Tensor) else x_t
    if x_t.shape[1] != cfg.latent_channels:
        raise ValueError(f"latent has {x_t.shape[1]} channels, config expects {cfg.latent_channels}")
    use_control = params.has_control() if control is None else control
    if use_control and z_lq is not None and tuple(np.shape(getattr(z_lq, "data", z_lq))) != x_t.shape:
        raise ValueError(f"x_t shape {x_t.shape} differs from z_lq shape {np.shape(z_lq)}")
    vt = embed_tokens(x_t, params, cfg)
    temb = timestep_embed(t, params, cfg)
    ctx, mask = caption_context(caption, params, cfg)
    injected: list[Injection] = [None] * cfg.N
    if use_control:
        if z_lq is None:
            raise ValueError("control path requires z_lq")
        z_c = tc.as_tensor(np.asarray(getattr(z_lq, "data", z_lq), dtype=dt))
        if flags.projector_on:
            z_c = control_projector(z_c, params, cfg)
        c_in = vt.tokens + patchify(z_c, cfg).tokens @ params["ctrl.in.w"] + params["ctrl.in.b"]
        cs = dit_forward(c_in, ctx, mask, temb, params, cfg, prefix="ctrl.block",
                         blocks=cfg.control_blocks, head=False)

        def make(i):
            return lambda x: connector_addend(x, cs[i // 6], params, i, flags.connector_mode, cfg)

        injected = [make(i) for i in range(cfg.N)]
    out = dit_forward(vt.tokens, ctx, mask, temb, params, cfg, injected)
    return unpatchify(VisualTokens(out, vt.grid), cfg)


def config_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)
