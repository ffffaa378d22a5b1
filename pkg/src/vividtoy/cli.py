"""Command-line entry point: ``vividtoy <command> --config run.json --out workdir``.

Exit codes: 0 success, 1 selfcheck failure, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_ablation
from .data import QualityThresholds, make_real_set, quality_filter, read_dataset, write_dataset
from .dataio import DataError, read_frames, write_frames
from .degrade import degrade
from .distill import build_distilled_set
from .metrics import report
from .pipeline import DivergenceError, finetune, load_checkpoint, pretrain, save_checkpoint
from .restore import restore, restore_tiled
from .seeding import derive_seed

log = logging.getLogger("vividtoy")

COMMANDS = ("gen-data", "pretrain", "distill", "finetune", "restore", "eval", "selfcheck")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class RunLog:
    """Line-delimited JSON log whose first record is the reproducibility header."""

    def __init__(self, path: Path, header: dict):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")
        self.write({"header": header})

    def write(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _paths(out: Path) -> dict[str, Path]:
    return {
        "train": out / "data" / "train.vvt",
        "heldout": out / "data" / "heldout.vvt",
        "mixed": out / "data" / "mixed.vvt",
        "backbone": out / "checkpoints" / "backbone.vvt",
        "full": out / "checkpoints" / "finetuned.vvt",
        "restored": out / "restored",
        "logs": out / "logs",
    }


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def cmd_gen_data(cfg: RunConfig, args, rl: RunLog) -> None:
    p = _paths(args.out)
    d = cfg.data
    seeds = [derive_seed(cfg.seed, "clip", i) for i in range(d.n_train + d.n_heldout)]
    fr = (d.frames_min, d.frames_max)
    train = make_real_set(seeds[:d.n_train], d.height, d.width, fr, d.misalign_rate)
    held = make_real_set(seeds[d.n_train:], d.height, d.width, fr, 0.0)
    th = QualityThresholds(d.min_sharpness, d.max_flicker)
    kept = quality_filter(train, th)
    held_kept = quality_filter(held, th)
    p["train"].parent.mkdir(parents=True, exist_ok=True)
    write_dataset(kept, p["train"])
    write_dataset(held_kept, p["heldout"])
    rl.write({"train": len(kept), "rejected": len(train) - len(kept), "heldout": len(held_kept)})


def cmd_pretrain(cfg: RunConfig, args, rl: RunLog) -> None:
    p = _paths(args.out)
    pairs = read_dataset(_require(p["train"], "training set"))
    tcfg = cfg.train.build("pretrain", cfg.seed)
    ck = pretrain(pairs, tcfg, cfg.net, cfg.schedule.build(), log_fn=rl.write)
    ck.meta["config_hash"] = cfg.hash()
    p["backbone"].parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck, p["backbone"])


def cmd_distill(cfg: RunConfig, args, rl: RunLog) -> None:
    p = _paths(args.out)
    pairs = read_dataset(_require(p["train"], "training set"))
    backbone = load_checkpoint(_require(p["backbone"], "backbone checkpoint"))
    dcfg = cfg.distill.build(cfg.seed)
    mixed = build_distilled_set(backbone, pairs, dcfg)
    manifest = write_dataset(mixed, p["mixed"])
    rl.write({"counts": manifest["counts"], "t_star": dcfg.resolve_t_star(backbone.schedule.T)})


def cmd_finetune(cfg: RunConfig, args, rl: RunLog) -> None:
    p = _paths(args.out)
    backbone = load_checkpoint(_require(p["backbone"], "backbone checkpoint"))
    src = p["mixed"] if cfg.train.distill_on and p["mixed"].exists() else p["train"]
    pairs = read_dataset(_require(src, "training set"))
    tcfg = cfg.train.build("finetune", cfg.seed)
    ck = finetune(backbone, pairs, tcfg, cfg.degrade.build(cfg.seed), log_fn=rl.write)
    ck.meta["config_hash"] = cfg.hash()
    save_checkpoint(ck, p["full"])


def cmd_restore(cfg: RunConfig, args, rl: RunLog) -> None:
    p = _paths(args.out)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else p["full"]
    ckpt = load_checkpoint(_require(ckpt_path, "checkpoint"))
    steps = cfg.restore.steps
    tile = cfg.restore.tile
    seed = derive_seed(cfg.seed, "restore")
    if args.input:
        lq = read_frames(args.input)
        caption = np.array(json.loads(args.caption) if args.caption else [0], dtype=np.int32)
        jobs = [("input", lq, caption, None)]
    else:
        held = read_dataset(_require(p["heldout"], "held-out set"))
        dseed = cfg.degrade.build(cfg.seed)
        jobs = [(h.id, degrade(h.video, dseed, seed=derive_seed(cfg.seed, "eval-lq", h.id)), h.caption, h.video)
                for h in held]
    for name, lq, caption, clean in jobs:
        t0 = time.perf_counter()
        run = {}
        if tile:
            out = restore_tiled(ckpt, lq, caption, tile, steps, seed, run_log=run)
        else:
            out = restore(ckpt, lq, caption, steps, seed)
            run.update({"steps": steps, "tiles": 1, "seam_metric": 0.0})
        run.update({"id": name, "runtime": round(time.perf_counter() - t0, 3)})
        d = p["restored"] / name
        write_frames(out, d / "restored")
        write_frames(lq, d / "lq")
        if clean is not None:
            write_frames(clean, d / "clean")
        rl.write(run)


def cmd_eval(cfg: RunConfig, args, rl: RunLog) -> None:
    p = _paths(args.out)
    root = _require(p["restored"], "restored outputs")
    rows = []
    for d in sorted(x for x in root.iterdir() if x.is_dir()):
        if not (d / "clean").exists():
            continue
        clean = read_frames(d / "clean")
        out = read_frames(d / "restored")
        lq = read_frames(d / "lq")
        r_out, r_lq = report(out, clean), report(lq, clean)
        row = {"id": d.name, "restored": {"psnr": r_out.psnr, "ssim": r_out.ssim, "tc": r_out.temporal_consistency},
               "lq": {"psnr": r_lq.psnr, "ssim": r_lq.ssim, "tc": r_lq.temporal_consistency}}
        rows.append(row)
        rl.write(row)
    if not rows:
        raise DataError(f"no restored clips with references under {root}")
    summary = {
        "restored_psnr": float(np.mean([r["restored"]["psnr"] for r in rows])),
        "lq_psnr": float(np.mean([r["lq"]["psnr"] for r in rows])),
        "restored_ssim": float(np.mean([r["restored"]["ssim"] for r in rows])),
        "lq_ssim": float(np.mean([r["lq"]["ssim"] for r in rows])),
        "n": len(rows),
    }
    (args.out / "eval.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    rl.write({"summary": summary})


def cmd_selfcheck(cfg: RunConfig, args, rl: RunLog) -> bool:
    from .selfcheck import run_all

    results = run_all()
    for name, ok, detail in results:
        rl.write({"check": name, "ok": ok, "detail": detail})
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return all(ok for _, ok, _ in results)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "restore": cmd_restore,
    "eval": cmd_eval,
    "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vividtoy", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="run config JSON (defaults apply when omitted)")
    ap.add_argument("--seed", type=int, help="64-bit run seed; overrides the config")
    ap.add_argument("--out", type=Path, default=Path("run"), help="work directory")
    ap.add_argument("--ablation", default="", help="e.g. projector=off,connector=mlp_only,distill=off")
    ap.add_argument("--steps", type=int, help="training steps (pretrain/finetune) or sampling steps (restore)")
    ap.add_argument("--tile", type=int, help="restore tile size in latent cells")
    ap.add_argument("--checkpoint", help="restore: checkpoint path (default <out>/checkpoints/finetuned.vvt)")
    ap.add_argument("--input", help="restore: directory of frame_%%04d.ppm files")
    ap.add_argument("--caption", help="restore: caption token ids as a JSON list")
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    if args.ablation:
        cfg = cfg.with_overrides("train", **parse_ablation(args.ablation))
    if args.steps is not None:
        if args.command == "pretrain":
            cfg = cfg.with_overrides("train", pretrain_steps=args.steps)
        elif args.command == "finetune":
            cfg = cfg.with_overrides("train", steps=args.steps)
        elif args.command == "restore":
            cfg = cfg.with_overrides("restore", steps=args.steps)
    if args.tile is not None:
        cfg = cfg.with_overrides("restore", tile=args.tile)
    cfg.validate()
    return cfg


def _limit_threads():
    n = int(os.environ.get("VIVIDTOY_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    limiter = _limit_threads()
    rl = None
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        header = {"command": args.command, "config_hash": cfg.hash(), "seed": cfg.seed,
                  "code_version": __version__, "connector_mode": cfg.train.connector_mode,
                  "projector_on": cfg.train.projector_on, "distill_on": cfg.train.distill_on,
                  "config": cfg.to_dict()}
        rl = RunLog(_paths(args.out)["logs"] / f"{args.command}.jsonl", header)
        ok = HANDLERS[args.command](cfg, args, rl)
        if args.command == "selfcheck" and not ok:
            return EXIT_FAIL
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        if rl is not None:
            rl.close()
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
