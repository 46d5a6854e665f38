"""Deterministic moving-sprite surveillance videos with exact optical flow.

Normal sprites move with a constant integer velocity drawn from a small set
of "walkway" directions.  Test videos additionally contain one anomalous
sprite per anomaly interval; it only exists inside its interval and moves

* ``speed``:    ``speed_factor`` times faster than a normal sprite,
* ``reverse``:  against the normal directions,
* ``teleport``: normally, except for one large jump in the middle.

The flow from frame ``f`` to ``f+1`` equals the sprite displacement on every
pixel the sprite covers in frame ``f`` and is zero elsewhere.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError
from ..tensorstore import DatasetManifest, VideoRecord, save_manifest, write_tensor

logger = logging.getLogger(__name__)

NORMAL_DIRECTIONS = ((1, 0), (0, 1), (1, 1))
ANOMALY_KINDS = ("speed", "reverse", "teleport")
BACKGROUND = 0.1


@dataclass
class SynthConfig:
    seed: int = 7
    height: int = 128
    width: int = 128
    sprites_per_video: int = 3
    sprite_size: tuple[int, int] = (10, 16)
    normal_speeds: tuple[int, ...] = (1, 2)
    anomaly_kinds: tuple[str, ...] = ("speed",)
    speed_factor: int = 4
    teleport_distance: int = 40
    video_length: int = 48
    n_train: int = 8
    n_test: int = 4
    anomaly_length: tuple[int, int] = (10, 14)
    anomaly_intervals: dict | None = None  # {test video index: [[start, end], ...]} inclusive

    def __post_init__(self):
        bad = set(self.anomaly_kinds) - set(ANOMALY_KINDS)
        if bad:
            raise ConfigError(f"unknown anomaly kinds {sorted(bad)}")
        if self.video_length < 2:
            raise ConfigError("videos need at least two frames")
        lo, hi = self.sprite_size
        if not 1 <= lo <= hi or hi >= min(self.height, self.width):
            raise ConfigError(f"invalid sprite size range {self.sprite_size}")
        if self.anomaly_intervals is not None:
            self.anomaly_intervals = {
                int(k): [tuple(map(int, iv)) for iv in v] for k, v in self.anomaly_intervals.items()
            }
            for vid, ivs in self.anomaly_intervals.items():
                if not 0 <= vid < self.n_test:
                    raise ConfigError(f"anomaly intervals given for unknown test video {vid}")
                _check_intervals(ivs, self.video_length)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _check_intervals(intervals, length):
    spans = sorted(intervals)
    for start, end in spans:
        if not 0 <= start <= end < length:
            raise ConfigError(f"interval {(start, end)} outside video of length {length}")
    for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
        if s1 <= e0:
            raise ConfigError(f"overlapping anomaly intervals {(s0, e0)} and {(s1, e1)}")


@dataclass
class Sprite:
    shape: str  # "rect" | "circle"
    w: int
    h: int
    intensity: float
    positions: dict = field(default_factory=dict)  # frame -> (x, y) top-left
    anomalous: bool = False

    def mask(self) -> np.ndarray:
        if self.shape == "rect":
            return np.ones((self.h, self.w), dtype=bool)
        yy, xx = np.mgrid[: self.h, : self.w]
        cy, cx = (self.h - 1) / 2, (self.w - 1) / 2
        return ((yy - cy) / (self.h / 2)) ** 2 + ((xx - cx) / (self.w / 2)) ** 2 <= 1.0

    def box(self, frame: int) -> list[int]:
        x, y = self.positions[frame]
        return [x, y, x + self.w, y + self.h]


def _place_track(rng, cfg: SynthConfig, w, h, start, end, velocity_at):
    """Choose a start point keeping the whole track inside the frame, or None."""
    xs, ys = [0], [0]
    for f in range(start, end):
        dx, dy = velocity_at(f)
        xs.append(xs[-1] + dx)
        ys.append(ys[-1] + dy)
    x_lo, x_hi = -min(xs), cfg.width - w - max(xs)
    y_lo, y_hi = -min(ys), cfg.height - h - max(ys)
    if x_lo > x_hi or y_lo > y_hi:
        return None
    x0 = int(rng.integers(x_lo, x_hi + 1))
    y0 = int(rng.integers(y_lo, y_hi + 1))
    return {f: (x0 + xs[i], y0 + ys[i]) for i, f in enumerate(range(start, end + 1))}


def _new_sprite(rng, cfg: SynthConfig, start, end, velocity_at, anomalous=False) -> Sprite:
    lo, hi = cfg.sprite_size
    for _ in range(100):
        w, h = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        sprite = Sprite(
            shape=str(rng.choice(["rect", "circle"])),
            w=w,
            h=h,
            intensity=float(rng.uniform(0.5, 1.0)),
            anomalous=anomalous,
        )
        positions = _place_track(rng, cfg, w, h, start, end, velocity_at)
        if positions is not None:
            sprite.positions = positions
            return sprite
    raise ConfigError("sprite track does not fit in the frame; shorten the video or slow sprites")


def _normal_velocity(rng, cfg):
    d = NORMAL_DIRECTIONS[int(rng.integers(len(NORMAL_DIRECTIONS)))]
    s = int(rng.choice(cfg.normal_speeds))
    return (d[0] * s, d[1] * s)


def _anomalous_sprite(rng, cfg: SynthConfig, kind, start, end) -> Sprite:
    vx, vy = _normal_velocity(rng, cfg)
    if kind == "speed":
        v = (vx * cfg.speed_factor, vy * cfg.speed_factor)
        return _new_sprite(rng, cfg, start, end, lambda f: v, anomalous=True)
    if kind == "reverse":
        v = (-vx, -vy)
        return _new_sprite(rng, cfg, start, end, lambda f: v, anomalous=True)
    jump_at = (start + end) // 2
    dx, dy = NORMAL_DIRECTIONS[int(rng.integers(len(NORMAL_DIRECTIONS)))]
    norm = np.hypot(dx, dy)
    jump = (int(round(dx / norm * cfg.teleport_distance)), int(round(dy / norm * cfg.teleport_distance)))
    return _new_sprite(
        rng, cfg, start, end, lambda f: jump if f == jump_at else (vx, vy), anomalous=True
    )


def _random_intervals(rng, cfg: SynthConfig):
    lo, hi = cfg.anomaly_length
    length = int(rng.integers(lo, hi + 1))
    length = min(length, cfg.video_length - 1)
    start = int(rng.integers(1, cfg.video_length - length + 1))
    return [(start, start + length - 1)]


def render(sprites, frame: int, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Frame ``frame`` as uint8 ``(H, W)`` and the flow to ``frame + 1`` as ``(2, H, W)``."""
    img = np.full((cfg.height, cfg.width), BACKGROUND, dtype=np.float64)
    flow = np.zeros((2, cfg.height, cfg.width), dtype=np.float32)
    for sp in sprites:
        if frame not in sp.positions:
            continue
        x, y = sp.positions[frame]
        m = sp.mask()
        img[y : y + sp.h, x : x + sp.w][m] = sp.intensity
        if frame + 1 in sp.positions:
            nx, ny = sp.positions[frame + 1]
            flow[0, y : y + sp.h, x : x + sp.w][m] = nx - x
            flow[1, y : y + sp.h, x : x + sp.w][m] = ny - y
        else:
            flow[:, y : y + sp.h, x : x + sp.w][:, m] = 0.0
    return np.round(img * 255).astype(np.uint8), flow


def make_video(cfg: SynthConfig, split: str, index: int):
    """Sprites, per-frame labels and intervals of one video (pure function of the config)."""
    split_code = 0 if split == "train" else 1
    rng = np.random.default_rng([cfg.seed, split_code, index])
    n = cfg.video_length
    sprites = []
    for _ in range(cfg.sprites_per_video):
        v = _normal_velocity(rng, cfg)
        sprites.append(_new_sprite(rng, cfg, 0, n - 1, lambda f, v=v: v))
    labels = None
    intervals = []
    if split == "test":
        if cfg.anomaly_intervals is not None:
            intervals = list(cfg.anomaly_intervals.get(index, []))
        else:
            intervals = _random_intervals(rng, cfg)
        _check_intervals(intervals, n)
        labels = [0] * n
        for k, (start, end) in enumerate(intervals):
            kind = cfg.anomaly_kinds[(index + k) % len(cfg.anomaly_kinds)]
            sprites.append(_anomalous_sprite(rng, cfg, kind, start, end))
            for f in range(start, end + 1):
                labels[f] = 1
    return sprites, labels, intervals


def gen_synthetic(config: SynthConfig, out_dir) -> dict[str, DatasetManifest]:
    """Write frames (PNG), flows (tensor files) and ``train.jsonl``/``test.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split, count in (("train", config.n_train), ("test", config.n_test)):
        videos = []
        for index in range(count):
            vid = f"{split}_{index:02d}"
            sprites, labels, _ = make_video(config, split, index)
            vdir = out / split / vid
            (vdir / "frames").mkdir(parents=True, exist_ok=True)
            (vdir / "flows").mkdir(parents=True, exist_ok=True)
            frames, flows, boxes = [], [], []
            for f in range(config.video_length):
                img, flow = render(sprites, f, config)
                rel = f"{split}/{vid}/frames/{f:04d}.png"
                Image.fromarray(img, mode="L").save(out / rel, optimize=False)
                frames.append(rel)
                if f < config.video_length - 1:
                    rel = f"{split}/{vid}/flows/{f:04d}.hf2t"
                    write_tensor(flow, out / rel)
                    flows.append(rel)
                boxes.append([sp.box(f) for sp in sprites if f in sp.positions])
            videos.append(VideoRecord(vid, frames, flows, boxes, labels))
        manifest = DatasetManifest(split=split, videos=videos, root=out)
        save_manifest(manifest, out / f"{split}.jsonl")
        manifests[split] = manifest
        logger.info("wrote %d %s videos to %s", count, split, out)
    with open(out / "synth_config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    return manifests
