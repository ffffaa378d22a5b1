import numpy as np
import pytest

from vividtoy import pipeline
from vividtoy.data import make_real_set
from vividtoy.net import NetConfig
from vividtoy.pipeline import TrainConfig

TINY = NetConfig(N=6, hidden_dim=16, heads=2, projector_channels=4)


@pytest.fixture(scope="session")
def tiny_backbone():
    pairs = make_real_set(range(4), 16, 16, (2, 3))
    return pipeline.pretrain(pairs, TrainConfig(stage="pretrain", learning_rate=1e-3, steps=3, seed=0), TINY)


@pytest.fixture(scope="session")
def tiny_finetuned(tiny_backbone):
    pairs = make_real_set(range(4), 16, 16, (2, 3))
    ck = pipeline.finetune(tiny_backbone, pairs, TrainConfig(learning_rate=1e-2, steps=3, seed=1))
    # push the zero-init paths away from zero so control actually changes the output
    rng = np.random.default_rng(0)
    for n in ck.params.names():
        if n.endswith(("mlp.w2", "ca.o", "proj.out.w")):
            ck.params[n].data[...] = (rng.standard_normal(ck.params[n].shape) * 0.05).astype(np.float32)
    return ck


ACCEPTANCE: dict = {}


@pytest.fixture()
def criterion():
    """Record one pass/fail line per acceptance criterion; lines are printed in the terminal summary."""
    def record(key: str, title: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = (title, bool(ok), detail)
        return bool(ok)
    return record


def _sort_key(k: str):
    head = "".join(ch for ch in k if ch.isdigit())
    return (int(head) if head else 99, k)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=_sort_key):
        title, ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}. {title}: {detail}")
