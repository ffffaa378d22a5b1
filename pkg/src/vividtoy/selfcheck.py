"""Fast structural checks run by ``vividtoy selfcheck``; each returns (name, ok, detail)."""

from __future__ import annotations

import numpy as np

from . import codec
from . import tensorcore as tc
from .net import FROZEN, ControlFlags, NetConfig, init_backbone, init_control, v_theta_forward
from .restore import plan_tiles
from .schedule import add_noise, make_linear_schedule, recover_x0, sample, v_target
from .seeding import stream


def check_autodiff():
    rng = stream(0, "selfcheck", "ad")
    w = tc.Tensor(rng.standard_normal((4, 3)))

    def f(x):
        h = tc.layer_norm(tc.gelu(x @ w), 1e-5)
        return (tc.softmax(h, axis=-1) * h).sum()

    err = tc.finite_difference_check(f, rng.standard_normal((5, 4)))
    return "autodiff", err <= 1e-5, f"max rel err {err:.2e}"


def check_v_algebra():
    sched = make_linear_schedule()
    rng = stream(0, "selfcheck", "v")
    worst = 0.0
    for _ in range(200):
        t = int(rng.integers(0, sched.T))
        x0, eps = rng.standard_normal(8), rng.standard_normal(8)
        xt = add_noise(x0, t, eps, sched)
        worst = max(worst, float(np.abs(recover_x0(xt, v_target(x0, eps, t, sched), t, sched) - x0).max()))
    return "v_algebra", worst <= 1e-12, f"max err {worst:.2e}"


def check_solver():
    sched = make_linear_schedule()
    x0 = stream(0, "selfcheck", "x0").standard_normal((3, 4))

    def oracle(x, t, _):
        ab = sched.ab(t)
        eps = (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
        return v_target(x0, eps, t, sched)

    xs = stream(0, "selfcheck", "xs").standard_normal(x0.shape)
    err = max(float(np.abs(sample(oracle, xs, sched.T - 1, n, None, sched) - x0).max()) for n in (1, 50))
    return "solver_oracle", err <= 1e-6, f"max err {err:.2e}"


def check_codec():
    rng = stream(0, "selfcheck", "codec")
    v = (rng.integers(0, 2**16, size=(3, 3, 8, 8)) / 2**16).astype(np.float32)
    ok = np.array_equal(codec.decode(codec.encode(v)), v)
    return "codec_lossless", bool(ok), "3x3x8x8 dyadic clip"


def check_init_identity():
    cfg = NetConfig(N=6, hidden_dim=16, heads=2, projector_channels=4)
    bb = init_backbone(cfg, 1)
    full = init_control(bb.copy(), cfg, 2)
    rng = stream(0, "selfcheck", "init")
    x = rng.standard_normal((2, 12, 4, 4)).astype(np.float32)
    z = rng.standard_normal(x.shape).astype(np.float32)
    cap = [3, 5, 0]
    a = v_theta_forward(x, None, cap, 500, bb, cfg, control=False).data
    b = v_theta_forward(x, z, cap, 500, full, cfg, ControlFlags()).data
    same = np.array_equal(a, b) and full.checksum(FROZEN) == bb.checksum(FROZEN)
    return "init_identity", bool(same), "zero-init control leaves the backbone output unchanged"


def check_tiling():
    grid = plan_tiles(10, 10, 4)
    cov = grid.coverage()
    return "tile_coverage", bool((cov == 1).all()), f"{len(grid.tiles)} tiles on 10x10"


CHECKS = (check_autodiff, check_v_algebra, check_solver, check_codec, check_init_identity, check_tiling)


def run_all() -> list[tuple[str, bool, str]]:
    out = []
    for fn in CHECKS:
        try:
            name, ok, detail = fn()
            out.append((name, bool(ok), detail))
        except Exception as e:  # a crash is a failed check, not a crashed command
            out.append((fn.__name__.removeprefix("check_"), False, f"{type(e).__name__}: {e}"))
    return out
