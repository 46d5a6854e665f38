"""Anomaly curves and prediction-error heat maps.

Every figure is written as PNG and SVG next to a JSON sidecar holding the
plotted numbers, so downstream checks can read values instead of pixels.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

from ..scoring import read_score_dump  # noqa: E402

FORMATS = ("png", "svg")


def label_intervals(frame_index, labels) -> list[tuple[int, int]]:
    """Inclusive ``(start, end)`` runs of consecutive frames labeled 1."""
    runs: list[list[int]] = []
    for f, y in zip(frame_index, labels):
        if not y:
            continue
        if runs and f == runs[-1][1] + 1:
            runs[-1][1] = f
        else:
            runs.append([f, f])
    return [tuple(r) for r in runs]


def _save(fig, stem: Path, sidecar: dict) -> dict:
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = {}
    for fmt in FORMATS:
        p = stem.with_suffix(f".{fmt}")
        fig.savefig(p, format=fmt, dpi=100, metadata={"Date": None} if fmt == "svg" else None)
        paths[fmt] = str(p)
    plt.close(fig)
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    paths["json"] = str(stem.with_suffix(".json"))
    return paths


def plot_anomaly_curve(video_id, frame_index, smoothed, labels=None, raw=None, stem=None, auroc=None):
    """Smoothed score over frames with ground-truth anomalous frames shaded."""
    frame_index = [int(f) for f in frame_index]
    intervals = label_intervals(frame_index, labels) if labels is not None else []
    fig, ax = plt.subplots(figsize=(8, 2.5))
    if raw is not None:
        ax.plot(frame_index, raw, color="0.7", lw=0.8, label="fused")
    ax.plot(frame_index, smoothed, color="C3", lw=1.5, label="smoothed")
    for start, end in intervals:
        ax.axvspan(start - 0.5, end + 0.5, color="C0", alpha=0.2, lw=0)
    ax.set_xlabel("frame")
    ax.set_ylabel("anomaly score")
    title = video_id if auroc is None else f"{video_id}  AUROC {auroc:.3f}"
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize=7)
    fig.tight_layout()
    sidecar = {
        "video_id": video_id,
        "frame_index": frame_index,
        "smoothed": [float(v) for v in smoothed],
        "fused": None if raw is None else [float(v) for v in raw],
        "intervals": [list(iv) for iv in intervals],
        "auroc": auroc,
    }
    return _save(fig, Path(stem), sidecar)


def plot_error_heatmap(video_id, frame_index, frame, error_map, boxes, stem):
    """Frame with its per-pixel prediction error overlaid."""
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    axes[0].imshow(frame, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title(f"{video_id} #{frame_index}", fontsize=8)
    im = axes[1].imshow(error_map, cmap="jet", vmin=0, vmax=max(float(error_map.max()), 1e-12))
    axes[1].set_title("prediction error", fontsize=8)
    for ax in axes:
        for x0, y0, x1, y1 in boxes:
            ax.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, ec="m", lw=0.8))
        ax.axis("off")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    fig.tight_layout()
    sidecar = {
        "video_id": video_id,
        "frame_index": int(frame_index),
        "shape": list(error_map.shape),
        "boxes": [list(map(int, b)) for b in boxes],
        "max_error": float(error_map.max()),
        "mean_error": float(error_map.mean()),
    }
    return _save(fig, Path(stem), sidecar)


def plot_score_dump(dump_path, out_dir) -> dict:
    """Anomaly curves for every video in a score dump."""
    by_video = defaultdict(list)
    for rec in read_score_dump(dump_path):
        by_video[rec["video_id"]].append(rec)
    out = {}
    for vid, recs in sorted(by_video.items()):
        recs.sort(key=lambda r: r["frame_index"])
        labels = [r["label"] for r in recs]
        out[vid] = plot_anomaly_curve(
            vid,
            [r["frame_index"] for r in recs],
            [r["smoothed"] for r in recs],
            labels=None if any(y is None for y in labels) else labels,
            raw=[r["fused"] for r in recs],
            stem=Path(out_dir) / f"curve_{vid}",
        )
    return out


def paste_error_maps(shape, maps, boxes) -> np.ndarray:
    """Resize per-object error maps back to their boxes and max-merge them on a canvas."""
    canvas = np.zeros(shape, dtype=np.float32)
    for m, (x0, y0, x1, y1) in zip(maps, boxes):
        patch = F.interpolate(
            torch.as_tensor(m, dtype=torch.float32)[None, None],
            size=(int(y1 - y0), int(x1 - x0)),
            mode="bilinear",
            align_corners=False,
        )[0, 0].numpy()
        np.maximum(canvas[y0:y1, x0:x1], patch, out=canvas[y0:y1, x0:x1])
    return canvas
