"""Procedural toy clips with captions, a no-reference quality filter and dataset files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataio import CorruptFileError, DataError, read_vvt, write_vvt
from .seeding import stream

SHAPES = ("square", "disk", "bar")
COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.85, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "white": (0.95, 0.95, 0.95),
    "cyan": (0.1, 0.85, 0.9),
}
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
TEXTURES = ("solid", "striped", "dotted")
BACKGROUNDS = ("flat", "gradient", "checker", "stripes")

ATTRIBUTES = {
    "shape": SHAPES,
    "color": tuple(COLORS),
    "direction": tuple(DIRECTIONS),
    "texture": TEXTURES,
    "background": BACKGROUNDS,
}
VOCAB = ["<pad>"] + [w for words in ATTRIBUTES.values() for w in words]
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
CAPTION_LEN = 8
SOURCES = ("real", "distilled")


@dataclass(frozen=True)
class Scene:
    background: str
    shape: str
    color: str
    direction: str
    texture: str
    size: int
    speed: int
    start: tuple[int, int]
    bg_level: float

    def attributes(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in ATTRIBUTES}


@dataclass(frozen=True)
class CaptionSpec:
    tokens: np.ndarray
    misaligned: bool = False

    def decode(self) -> dict[str, str]:
        return decode_caption(self.tokens)


def encode_caption(attrs: dict[str, str], length: int = CAPTION_LEN) -> np.ndarray:
    ids = [WORD_ID[attrs[k]] for k in ATTRIBUTES]
    return np.array(ids + [0] * (length - len(ids)), dtype=np.int32)


def decode_caption(tokens: Sequence[int]) -> dict[str, str]:
    out: dict[str, str] = {}
    for tid in np.asarray(tokens).tolist():
        if tid == 0:
            continue
        if not 0 < tid < len(VOCAB):
            raise ValueError(f"caption token {tid} outside vocabulary")
        word = VOCAB[tid]
        kind = next(k for k, words in ATTRIBUTES.items() if word in words)
        if kind in out:
            raise ValueError(f"caption names {kind} twice")
        out[kind] = word
    missing = set(ATTRIBUTES) - set(out)
    if missing:
        raise ValueError(f"caption lacks {sorted(missing)}")
    return out


def _background(kind: str, level: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "flat":
        g = np.full((h, w), level)
    elif kind == "gradient":
        g = level * 0.5 + 0.5 * level * xx / max(w - 1, 1)
    elif kind == "checker":
        g = np.where(((yy // 4) + (xx // 4)) % 2 == 0, level, level * 0.5)
    else:
        g = np.where((yy // 3) % 2 == 0, level, level * 0.6)
    return np.repeat(g[None], 3, axis=0)


def _object_mask(shape: str, size: int, h: int, w: int, cy: int, cx: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    # wrap-around distances keep the object in frame for any motion
    dy = (yy - cy + h // 2) % h - h // 2
    dx = (xx - cx + w // 2) % w - w // 2
    r = size / 2
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "disk":
        return dy**2 + dx**2 <= r**2
    return (np.abs(dy) <= max(1.0, r / 3)) & (np.abs(dx) <= r * 1.5)


def _texture(kind: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "solid":
        return np.ones((h, w))
    if kind == "striped":
        return np.where((xx + yy) // 2 % 2 == 0, 1.0, 0.45)
    return np.where((yy % 3 == 0) & (xx % 3 == 0), 0.4, 1.0)


def render(scene: Scene, frames: int, h: int, w: int) -> np.ndarray:
    bg = _background(scene.background, scene.bg_level, h, w)
    tex = _texture(scene.texture, h, w)
    col = np.array(COLORS[scene.color])[:, None, None]
    dy, dx = DIRECTIONS[scene.direction]
    out = np.empty((frames, 3, h, w))
    for f in range(frames):
        cy = (scene.start[0] + dy * scene.speed * f) % h
        cx = (scene.start[1] + dx * scene.speed * f) % w
        m = _object_mask(scene.shape, scene.size, h, w, cy, cx)
        out[f] = np.where(m[None], col * tex[None], bg)
    return out.astype(np.float32)


def sample_scene(rng: np.random.Generator, h: int, w: int) -> Scene:
    pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    return Scene(
        background=pick(BACKGROUNDS),
        shape=pick(SHAPES),
        color=pick(tuple(COLORS)),
        direction=pick(tuple(DIRECTIONS)),
        texture=pick(TEXTURES),
        size=int(rng.integers(max(3, h // 5), max(4, h // 2))),
        speed=int(rng.integers(1, 3)),
        start=(int(rng.integers(h)), int(rng.integers(w))),
        bg_level=float(rng.uniform(0.25, 0.6)),
    )


def gen_clip(seed: int, frames: int, h: int, w: int, misalign_rate: float = 0.0):
    """Render one clip; with probability ``misalign_rate`` one caption attribute is swapped for a wrong value."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = stream(seed, "clip")
    scene = sample_scene(rng, h, w)
    video = render(scene, frames, h, w)
    attrs = scene.attributes()
    misaligned = bool(rng.random() < misalign_rate)
    if misaligned:
        kind = list(ATTRIBUTES)[int(rng.integers(len(ATTRIBUTES)))]
        wrong = [x for x in ATTRIBUTES[kind] if x != attrs[kind]]
        attrs[kind] = wrong[int(rng.integers(len(wrong)))]
    return video, CaptionSpec(encode_caption(attrs), misaligned), scene


# -- quality filter --------------------------------------------------------------

def sharpness(video: np.ndarray) -> float:
    """Variance of the 4-neighbour discrete Laplacian over interior pixels."""
    v = np.asarray(video, dtype=np.float64)
    lap = (v[..., :-2, 1:-1] + v[..., 2:, 1:-1] + v[..., 1:-1, :-2] + v[..., 1:-1, 2:]
           - 4 * v[..., 1:-1, 1:-1])
    return float(lap.var())


def flicker(video: np.ndarray) -> float:
    """Mean absolute difference between consecutive frame means (0 for one frame)."""
    means = np.asarray(video, dtype=np.float64).reshape(len(video), -1).mean(axis=1)
    if len(means) < 2:
        return 0.0
    return float(np.abs(np.diff(means)).mean())


@dataclass(frozen=True)
class QualityThresholds:
    min_sharpness: float = 1e-3
    max_flicker: float = 0.05


def quality_filter(clips: Iterable, thresholds: QualityThresholds = QualityThresholds()) -> list:
    """Keep clips with sharpness >= threshold and flicker <= threshold, preserving order.

    Items may be bare videos or objects with a ``video`` attribute.
    """
    if not (np.isfinite(thresholds.min_sharpness) and (np.isfinite(thresholds.max_flicker) or thresholds.max_flicker == np.inf)):
        raise ValueError("thresholds must be finite")
    kept = []
    for c in clips:
        v = getattr(c, "video", c)
        if sharpness(v) >= thresholds.min_sharpness and flicker(v) <= thresholds.max_flicker:
            kept.append(c)
    return kept


# -- datasets ---------------------------------------------------------------------

@dataclass
class Pair:
    id: str
    video: np.ndarray
    caption: np.ndarray
    source: str = "real"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        self.caption = np.asarray(self.caption, dtype=np.int32)


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def make_real_set(seeds: Sequence[int], h: int = 32, w: int = 32, frame_range=(5, 9),
                  misalign_rate: float = 0.0) -> list[Pair]:
    pairs = []
    for s in seeds:
        frames = int(stream(s, "frames").integers(frame_range[0], frame_range[1] + 1))
        video, cap, _ = gen_clip(s, frames, h, w, misalign_rate)
        pairs.append(Pair(f"real-{s}", video, cap.tokens, "real", int(s), {"misaligned": cap.misaligned}))
    return pairs


def write_dataset(pairs: Sequence[Pair], path) -> dict:
    ids = [p.id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("pair ids must be unique")
    tensors = {}
    items = []
    for p in pairs:
        decode_caption(p.caption)
        tensors[f"{p.id}/video"] = p.video
        tensors[f"{p.id}/caption"] = p.caption.astype(np.int32)
        items.append({"id": p.id, "seed": int(p.seed), "source": p.source,
                      "caption": p.caption.tolist(), "frames": int(p.video.shape[0]), "meta": p.meta})
    counts = {s: sum(p.source == s for p in pairs) for s in SOURCES}
    manifest = {"format": "vividtoy-dataset", "count": len(pairs), "counts": counts, "items": items}
    write_vvt(path, tensors)
    manifest_path(path).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return manifest


def read_dataset(path) -> list[Pair]:
    mp = manifest_path(path)
    if not Path(path).exists():
        raise DataError(f"missing dataset file {path}")
    if not mp.exists():
        raise DataError(f"missing dataset manifest {mp}")
    tensors = read_vvt(path)
    try:
        manifest = json.loads(mp.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"manifest is not valid JSON ({e.msg})", e.pos, mp) from None
    pairs = []
    for it in manifest["items"]:
        key = it["id"]
        if f"{key}/video" not in tensors:
            raise DataError(f"{path}: manifest lists {key} but container lacks it")
        cap = tensors[f"{key}/caption"]
        if cap.tolist() != it["caption"]:
            raise DataError(f"{path}: caption of {key} disagrees with manifest")
        pairs.append(Pair(key, tensors[f"{key}/video"], cap, it["source"], it["seed"], it.get("meta", {})))
    if len(pairs) != manifest["count"]:
        raise DataError(f"{path}: manifest count {manifest['count']} != {len(pairs)} items")
    return pairs
