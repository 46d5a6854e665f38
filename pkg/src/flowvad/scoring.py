"""Anomaly scores: per-STC error cues, z-normalized fusion, frame pooling, smoothing, AUROC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DegenerateStatisticsError, ShapeError, UndefinedMetricError

# (w_r, w_p) used on the three benchmark datasets
FUSION_WEIGHTS = {
    "ped2": (1.0, 0.1),
    "avenue": (0.05, 1.0),
    "shanghaitech": (0.02, 1.0),
}


def _to_numpy(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def squared_error(a, b, batched: bool = False):
    """Mean of squared differences; per leading-axis sample when ``batched``."""
    a, b = _to_numpy(a), _to_numpy(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if batched:
        return sq.reshape(sq.shape[0], -1).mean(axis=1)
    return float(sq.mean())


def recon_error(y, y_hat, batched: bool = False):
    """Flow reconstruction cue ``S_r``."""
    return squared_error(y, y_hat, batched)


def pred_error(x_next, x_hat, batched: bool = False):
    """Frame prediction cue ``S_p``."""
    return squared_error(x_next, x_hat, batched)


@dataclass
class ScoreStats:
    mu_r: float
    sigma_r: float
    mu_p: float
    sigma_p: float
    w_r: float = 1.0
    w_p: float = 1.0
    train_min: float = 0.0

    def __post_init__(self):
        if not (self.sigma_r > 0 and self.sigma_p > 0):
            raise DegenerateStatisticsError("standard deviations must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ScoreStats":
        return cls(**{k: float(v) for k, v in d.items()})


def _population_stats(scores, name):
    scores = _to_numpy(scores).ravel()
    if scores.size < 2:
        raise DegenerateStatisticsError(f"need at least 2 training {name} scores")
    mu, sigma = float(scores.mean()), float(scores.std())
    if not sigma > 0:
        raise DegenerateStatisticsError(f"training {name} scores are constant")
    return mu, sigma


def fit_stats(train_s_r, train_s_p, w_r: float = 1.0, w_p: float = 1.0) -> ScoreStats:
    """Population mean/std of each cue over training STCs.

    ``train_min`` is the smallest fused training score; it scores frames
    without any object.
    """
    mu_r, sigma_r = _population_stats(train_s_r, "reconstruction")
    mu_p, sigma_p = _population_stats(train_s_p, "prediction")
    stats = ScoreStats(mu_r, sigma_r, mu_p, sigma_p, w_r, w_p)
    stats.train_min = float(np.min(fuse(train_s_r, train_s_p, stats)))
    return stats


def fuse(s_r, s_p, stats: ScoreStats):
    """``w_r * (S_r - mu_r) / sigma_r + w_p * (S_p - mu_p) / sigma_p``."""
    s_r, s_p = _to_numpy(s_r), _to_numpy(s_p)
    out = stats.w_r * (s_r - stats.mu_r) / stats.sigma_r + stats.w_p * (s_p - stats.mu_p) / stats.sigma_p
    return float(out) if out.ndim == 0 else out


def frame_scores(objects_by_frame: Sequence[Sequence[float]], empty_value: float) -> np.ndarray:
    """Max object score per frame; frames without objects get ``empty_value``."""
    return np.array(
        [max(objs) if len(objs) else empty_value for objs in objects_by_frame], dtype=np.float64
    )


def pool_video(
    target_index, object_scores, n_frames: int, t: int, empty_value: float
) -> np.ndarray:
    """Per-frame scores for frames ``t..n_frames-1`` of one video."""
    groups: list[list[float]] = [[] for _ in range(n_frames - t)]
    for i, s in zip(np.asarray(target_index), np.asarray(object_scores, dtype=np.float64)):
        if not t <= i < n_frames:
            raise ShapeError(f"target index {i} outside {t}..{n_frames - 1}")
        groups[i - t].append(float(s))
    return frame_scores(groups, empty_value)


def median_smooth(series, window: int = 17) -> np.ndarray:
    """Centered running median with edge replication."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"median window must be odd and >= 1, got {window}")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0 or window == 1:
        return x.copy()
    half = window // 2
    padded = np.pad(x, half, mode="edge")
    return np.median(np.lib.stride_tricks.sliding_window_view(padded, window), axis=1)


def auroc(scores, labels) -> float:
    """Area under the ROC curve (ties count one half), via the rank-sum statistic."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise UndefinedMetricError("labels must be 0/1")
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def per_video_auroc(series: Mapping[str, tuple]) -> dict[str, float | None]:
    """AUROC per video; ``None`` where a video has a single class."""
    out = {}
    for vid, (scores, labels) in series.items():
        try:
            out[vid] = auroc(scores, labels)
        except UndefinedMetricError:
            out[vid] = None
    return out


def minmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    span = x.max() - x.min() if x.size else 0.0
    return (x - x.min()) / span if span > 0 else np.zeros_like(x)


# --------------------------------------------------------------------------- score dumps

DUMP_KEYS = ("video_id", "frame_index", "s_r", "s_p", "fused", "smoothed", "label")


def write_score_dump(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec.get(k) for k in DUMP_KEYS}, separators=(",", ":")) + "\n")


def read_score_dump(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
