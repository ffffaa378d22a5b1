"""Restoration inference: full-clip sampling and tiled aggregation by direct block concatenation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec
from .net import ControlFlags, v_theta_forward
from .pipeline import Checkpoint
from .schedule import sample
from .seeding import derive_seed, stream


@dataclass(frozen=True)
class Tile:
    row: int
    col: int
    src: tuple[int, int, int, int]  # y0, y1, x0, x1
    dst: tuple[int, int, int, int]


@dataclass(frozen=True)
class TileGrid:
    tile: int
    h: int
    w: int
    tiles: tuple[Tile, ...]

    def coverage(self) -> np.ndarray:
        cov = np.zeros((self.h, self.w), dtype=np.int64)
        for t in self.tiles:
            y0, y1, x0, x1 = t.dst
            cov[y0:y1, x0:x1] += 1
        return cov


def _axis_plan(n: int, tile: int) -> list[tuple[int, int, int, int]]:
    """(src0, src1, dst0, dst1) along one axis; the last tile is anchored to the far edge."""
    out = []
    start = 0
    while start < n:
        s0 = min(start, n - tile)
        out.append((s0, s0 + tile, start, min(start + tile, n)))
        start += tile
    return out


def plan_tiles(h: int, w: int, tile: int) -> TileGrid:
    if tile < 1 or tile > min(h, w):
        raise ValueError(f"tile {tile} larger than frame {h}x{w}")
    rows, cols = _axis_plan(h, tile), _axis_plan(w, tile)
    tiles = tuple(
        Tile(r, c, (ry[0], ry[1], cx[0], cx[1]), (ry[2], ry[3], cx[2], cx[3]))
        for r, ry in enumerate(rows)
        for c, cx in enumerate(cols)
    )
    return TileGrid(tile, h, w, tiles)


def checkpoint_flags(ckpt: Checkpoint) -> ControlFlags:
    t = ckpt.meta.get("train", {})
    return ControlFlags(t.get("projector_on", True), t.get("connector_mode", "dual"))


def restore_latent(ckpt: Checkpoint, z_lq: np.ndarray, caption, steps: int, seed: int,
                   flags: ControlFlags | None = None) -> np.ndarray:
    cfg = ckpt.net
    flags = flags or checkpoint_flags(ckpt)
    params = ckpt.params
    params.set_trainable([])
    z_lq = np.asarray(z_lq, dtype=cfg.np_dtype)
    control = params.has_control()

    def predict_v(x, t, cond):
        return v_theta_forward(x, z_lq, cond, t, params, cfg, flags, control=control).data

    x_start = stream(seed, "restore", "x_start").standard_normal(z_lq.shape).astype(cfg.np_dtype)
    return sample(predict_v, x_start, ckpt.schedule.T - 1, steps, caption, ckpt.schedule)


def restore(ckpt: Checkpoint, lq: np.ndarray, caption, steps: int = 50, seed: int = 0,
            flags: ControlFlags | None = None) -> np.ndarray:
    """Denoise from pure noise at t = T-1, conditioned on ``lq`` and ``caption``; returns a clamped video."""
    if ckpt.stage != "finetune" and ckpt.params.has_control():
        raise ValueError("inconsistent checkpoint")
    lq = np.asarray(lq)
    z_lq = codec.encode(lq.astype(ckpt.net.np_dtype))
    p = ckpt.net.patch
    if z_lq.shape[2] % p or z_lq.shape[3] % p:
        raise ValueError(f"latent grid {z_lq.shape[2:]} not divisible by patch {p}")
    return codec.decode(restore_latent(ckpt, z_lq, caption, steps, seed, flags)).astype(lq.dtype)


def seam_metric(video: np.ndarray, grid: TileGrid, f: int = codec.FACTOR) -> float:
    """Mean |gradient| across tile borders minus the mean |gradient| elsewhere (pixel units)."""
    v = np.asarray(video, dtype=np.float64)
    gx = np.abs(np.diff(v, axis=-1))
    gy = np.abs(np.diff(v, axis=-2))
    bx = sorted({t.dst[2] * f for t in grid.tiles if t.dst[2] > 0})
    by = sorted({t.dst[0] * f for t in grid.tiles if t.dst[0] > 0})
    mx = np.zeros(gx.shape[-1], bool)
    my = np.zeros(gy.shape[-2], bool)
    mx[[b - 1 for b in bx]] = True
    my[[b - 1 for b in by]] = True
    border = np.concatenate([gx[..., mx].ravel(), gy[..., my, :].ravel()])
    inner = np.concatenate([gx[..., ~mx].ravel(), gy[..., ~my, :].ravel()])
    if border.size == 0:
        return 0.0
    return float(border.mean() - inner.mean())


def restore_tiled(ckpt: Checkpoint, lq: np.ndarray, caption, tile: int, steps: int = 50, seed: int = 0,
                  flags: ControlFlags | None = None, run_log: dict | None = None) -> np.ndarray:
    """Restore latent tiles independently and copy each destination block without blending.

    ``tile`` is in latent cells. A frame that is exactly one tile reproduces ``restore``.
    """
    if tile % ckpt.net.patch:
        raise ValueError(f"tile {tile} not divisible by patch {ckpt.net.patch}")
    lq = np.asarray(lq)
    z_lq = codec.encode(lq.astype(ckpt.net.np_dtype))
    F, C, H, W = z_lq.shape
    grid = plan_tiles(H, W, tile)
    out = np.empty_like(z_lq)
    written = np.zeros((H, W), dtype=np.int64)
    for t in grid.tiles:
        y0, y1, x0, x1 = t.src
        # a single tile keeps the caller's seed so the degenerate case matches restore
        tseed = seed if len(grid.tiles) == 1 else derive_seed(seed, "tile", t.row, t.col)
        z = restore_latent(ckpt, z_lq[:, :, y0:y1, x0:x1], caption, steps, tseed, flags)
        d0, d1, e0, e1 = t.dst
        out[:, :, d0:d1, e0:e1] = z[:, :, d0 - y0:d1 - y0, e0 - x0:e1 - x0]
        written[d0:d1, e0:e1] += 1
    if not (written == 1).all():
        raise AssertionError("tile plan wrote some latent cells more or less than once")
    video = codec.decode(out).astype(lq.dtype)
    if run_log is not None:
        run_log.update({"steps": steps, "tiles": len(grid.tiles), "seam_metric": seam_metric(video, grid),
                        "coverage_ok": True})
    return video
