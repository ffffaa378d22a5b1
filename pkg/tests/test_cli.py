import json

import numpy as np
import pytest

from vividtoy import cli
from vividtoy.dataio import read_frames

TINY = {
    "seed": 3,
    "net": {"N": 6, "hidden_dim": 16, "heads": 2, "projector_channels": 4},
    "data": {"n_train": 4, "n_heldout": 2, "height": 16, "width": 16, "frames_min": 2, "frames_max": 3},
    "train": {"steps": 3, "pretrain_steps": 3, "learning_rate": 1e-3, "pretrain_learning_rate": 1e-3},
    "distill": {"t_star": 20, "denoise_steps": 2},
    "restore": {"steps": 2},
}


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


def header(out, cmd):
    return json.loads((out / "logs" / f"{cmd}.jsonl").read_text().splitlines()[0])["header"]


def test_all_stages_round_trip(tmp_path, cfg_path):
    out = tmp_path / "w"
    base = ["--config", str(cfg_path), "--out", str(out)]
    for cmd in ("gen-data", "pretrain", "distill", "finetune", "restore", "eval"):
        assert cli.main([cmd, *base]) == 0, cmd
        h = header(out, cmd)
        assert h["seed"] == 3 and h["code_version"] and len(h["config_hash"]) == 16
    summary = json.loads((out / "eval.json").read_text())
    assert summary["n"] >= 1 and np.isfinite(summary["restored_psnr"])
    mixed = json.loads((out / "data" / "mixed.vvt.json").read_text())
    assert mixed["counts"]["distilled"] >= 1
    ft = json.loads((out / "checkpoints" / "finetuned.vvt.json").read_text())
    bb = json.loads((out / "checkpoints" / "backbone.vvt.json").read_text())
    assert ft["checksums"]["frozen_backbone"] == bb["checksums"]["frozen_backbone"]
    # restore a user-supplied frame directory with the tiled path
    one = next((out / "restored").iterdir())
    rc = cli.main(["restore", *base, "--input", str(one / "lq"), "--caption", "[1, 5, 10, 13, 17]", "--tile", "4"])
    assert rc == 0
    rec = json.loads((out / "logs" / "restore.jsonl").read_text().splitlines()[1])
    assert rec["tiles"] >= 1 and "seam_metric" in rec
    assert read_frames(out / "restored" / "input" / "restored").shape == read_frames(one / "lq").shape


def test_same_seed_same_backbone(tmp_path, cfg_path):
    sums = []
    for k in range(2):
        out = tmp_path / f"w{k}"
        base = ["--config", str(cfg_path), "--out", str(out)]
        assert cli.main(["gen-data", *base]) == 0 and cli.main(["pretrain", *base]) == 0
        sums.append(json.loads((out / "checkpoints" / "backbone.vvt.json").read_text())["checksums"])
    assert sums[0] == sums[1]


def test_ablation_is_echoed_in_header(tmp_path, cfg_path):
    out = tmp_path / "w"
    base = ["--config", str(cfg_path), "--out", str(out)]
    for cmd in ("gen-data", "pretrain"):
        assert cli.main([cmd, *base]) == 0
    assert cli.main(["finetune", *base, "--ablation", "connector=mlp_only", "--steps", "1"]) == 0
    h = header(out, "finetune")
    assert h["connector_mode"] == "mlp_only" and h["config"]["train"]["steps"] == 1
    meta = json.loads((out / "checkpoints" / "finetuned.vvt.json").read_text())["meta"]
    assert meta["train"]["connector_mode"] == "mlp_only"


def test_restore_without_checkpoint_exits_3(tmp_path, capsys):
    out = tmp_path / "empty"
    assert cli.main(["restore", "--out", str(out)]) == 3
    assert str(out / "checkpoints" / "finetuned.vvt") in capsys.readouterr().err


def test_config_error_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"train": {"stpes": 3}}')
    assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path / "w")]) == 2
    assert "train.stpes" in capsys.readouterr().err
    assert cli.main(["gen-data", "--out", str(tmp_path / "w"), "--ablation", "connector=bogus"]) == 2
    assert cli.main(["gen-data", "--out", str(tmp_path / "w"), "--seed", str(2**64)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_4(tmp_path, cfg_path, capsys):
    doc = json.loads(cfg_path.read_text())
    doc["train"]["pretrain_learning_rate"] = 1e30
    doc["train"]["weight_decay"] = 0.0
    p = tmp_path / "div.json"
    p.write_text(json.dumps(doc))
    base = ["--config", str(p), "--out", str(tmp_path / "w")]
    assert cli.main(["gen-data", *base]) == 0
    assert cli.main(["pretrain", *base]) == 4
    assert "divergence" in capsys.readouterr().err


def test_selfcheck_passes(tmp_path, capsys):
    assert cli.main(["selfcheck", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
