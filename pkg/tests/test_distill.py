import numpy as np
import pytest

from vividtoy import codec, distill
from vividtoy.data import make_real_set
from vividtoy.distill import DistillConfig
from vividtoy.schedule import make_linear_schedule, v_target


def oracle(z0, sched):
    def predict(x, t, _):
        ab = sched.ab(t)
        eps = (x - np.sqrt(ab) * z0) / np.sqrt(1 - ab)
        return v_target(z0, eps, t, sched)
    return predict


def test_blend_counts():
    assert distill.distilled_count(500, DistillConfig()) == 100
    assert distill.distilled_count(7, DistillConfig()) == 2
    assert distill.distilled_count(10, DistillConfig(blend_real=1, blend_distilled=0)) == 0


def test_ratio_one_to_zero_is_identity(tiny_backbone):
    pairs = make_real_set(range(3), 16, 16, (2, 2))
    out = distill.build_distilled_set(tiny_backbone, pairs, DistillConfig(blend_real=1, blend_distilled=0))
    assert out == pairs


def test_t_star_defaults_and_bounds():
    assert DistillConfig().resolve_t_star(1000) == 500
    with pytest.raises(ValueError, match="t_star"):
        DistillConfig(t_star=1000).resolve_t_star(1000)
    with pytest.raises(ValueError, match="denoise_steps"):
        DistillConfig(t_star=10, denoise_steps=25).resolve_t_star(1000)
    with pytest.raises(ValueError):
        DistillConfig(blend_real=0, blend_distilled=1)


@pytest.mark.parametrize("steps,t_star", [(1, 500), (25, 500), (1, 0)])
def test_oracle_predictor_returns_source(tiny_backbone, steps, t_star):
    video = make_real_set([5], 16, 16, (3, 3))[0].video
    sched = tiny_backbone.schedule
    z0 = codec.encode(video.astype(np.float64))
    cfg = DistillConfig(t_star=t_star, denoise_steps=steps)
    z = distill.distill_latent(z0, None, oracle(z0, sched), sched, t_star, steps, seed=3)
    assert np.abs(z - z0).max() <= 1e-9
    out = distill.distill_sample(tiny_backbone, video, None, cfg, 3, predict_v=oracle(codec.encode(video), sched))
    assert np.abs(out - video).max() <= 1e-5


def test_build_set_keeps_captions_and_tags(tiny_backbone):
    pairs = make_real_set(range(5), 16, 16, (2, 2))
    cfg = DistillConfig(t_star=40, denoise_steps=2, seed=1)
    out = distill.build_distilled_set(tiny_backbone, pairs, cfg)
    extra = out[5:]
    assert out[:5] == pairs and len(extra) == 1
    d = extra[0]
    src = next(p for p in pairs if p.id == d.meta["source_id"])
    assert d.source == "distilled" and d.id.startswith("distilled-0-")
    assert np.array_equal(d.caption, src.caption)
    assert d.video.shape == src.video.shape and 0 <= d.video.min() and d.video.max() <= 1
    again = distill.build_distilled_set(tiny_backbone, pairs, cfg)
    assert np.array_equal(again[5].video, d.video)


def test_untrained_backbone_rejected(tiny_backbone):
    from dataclasses import replace
    fresh = replace(tiny_backbone, step=0)
    with pytest.raises(ValueError, match="pretrained"):
        distill.build_distilled_set(fresh, make_real_set([1], 16, 16, (2, 2)), DistillConfig())


def test_latent_cosine():
    a = np.array([1.0, 2.0, -1.0])
    assert distill.latent_cosine(a, a) == pytest.approx(1.0, abs=1e-12)
    assert distill.latent_cosine(a, -a) == pytest.approx(-1.0, abs=1e-12)


def test_retention_falls_with_t_star_oracle_free():
    # pure noise-to-signal bookkeeping: noised latent's cosine to its source shrinks with t
    s = make_linear_schedule()
    z0 = np.random.default_rng(0).standard_normal(4096)
    eps = np.random.default_rng(1).standard_normal(4096)
    cos = [distill.latent_cosine(np.sqrt(s.ab(t)) * z0 + np.sqrt(1 - s.ab(t)) * eps, z0) for t in (250, 500, 750)]
    assert cos[0] > cos[1] > cos[2]
