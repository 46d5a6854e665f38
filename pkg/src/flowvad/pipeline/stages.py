"""The three training stages, evaluation and the reconstructed-flow-count sweep."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from ..errors import DatasetError, FormatError
from ..prednet import PredModel
from ..reconnet import ReconModel
from ..scoring import (
    auroc,
    fit_stats,
    fuse,
    median_smooth,
    minmax,
    per_video_auroc,
    pool_video,
    write_score_dump,
)
from ..tensorstore import STCBatch, collect_stcs, load_frame, load_manifest
from ..training import (
    fit_joint,
    fit_pred,
    fit_recon,
    flat_flows,
    mix_flows,
    reconstruct,
    seed_everything,
    stc_cues,
)
from . import plots
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, save_config

logger = logging.getLogger(__name__)

# (w_r, w_p) of the single-cue ablations
ABLATIONS = {"recon_only": (1.0, 0.0), "pred_only": (0.0, 1.0)}


def state_hash(model: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- data


@lru_cache(maxsize=8)
def _stcs(manifest_path: str, split: str, t: int, size: int, mtime: float):
    manifest = load_manifest(manifest_path, split=split)
    return manifest, collect_stcs(manifest, t=t, size=size)


def load_split(config: RunConfig, split: str):
    """Manifest and stacked STCs of ``split`` (memoized per manifest file)."""
    path = config.manifest_path(split)
    if not path.is_file():
        raise DatasetError(f"{split} manifest not found: {path}")
    return _stcs(str(path), split, config.t, config.stc_size, path.stat().st_mtime)


def _resolve(ckpt) -> Checkpoint:
    return load_checkpoint(ckpt) if isinstance(ckpt, (str, Path)) else ckpt


# --------------------------------------------------------------------------- stages


def train_recon(config: RunConfig, out=None) -> Checkpoint:
    """Stage 1: the memory autoencoder on training flow cubes."""
    config = config.replace(stage="train_recon")
    _, batch = load_split(config, "train")
    seed_everything(config.seed)
    model = ReconModel(config.recon_config())
    result = fit_recon(model, batch.flows, config.optim())
    ckpt = Checkpoint(
        config=config,
        recon=model,
        optimizer_state=result.optimizer.state_dict(),
        epoch=result.epochs,
        seeds={"seed": config.seed},
        history={"recon_loss": result.history},
    )
    save_checkpoint(ckpt, out or Path(config.out_dir) / "recon")
    return ckpt


def _conditioning_flows(recon: ReconModel, flows, k: int, t: int) -> torch.Tensor:
    y = flat_flows(flows)
    return mix_flows(y, reconstruct(recon, flows), k, t)


def train_pred(config: RunConfig, recon_ckpt, out=None) -> Checkpoint:
    """Stage 2: the CVAE on flows from the frozen reconstruction network."""
    config = config.replace(stage="train_pred")
    recon = _resolve(recon_ckpt).require("recon").recon
    _, batch = load_split(config, "train")
    before = state_hash(recon)
    recon.requires_grad_(False)
    cond = _conditioning_flows(recon, batch.flows, config.k, config.t)
    seed_everything(config.seed)
    pred = PredModel(config.pred_config(channels=batch.frames.shape[2]))
    result = fit_pred(pred, batch.frames, cond, config.optim())
    recon.requires_grad_(True)
    if state_hash(recon) != before:
        raise RuntimeError("reconstruction weights changed while training the predictor")
    ckpt = Checkpoint(
        config=config,
        recon=recon,
        pred=pred,
        optimizer_state=result.optimizer.state_dict(),
        epoch=result.epochs,
        seeds={"seed": config.seed},
        history={"pred_loss": result.history, "recon_hash": before},
    )
    if out is not False:
        save_checkpoint(ckpt, out or Path(config.out_dir) / "pred")
    return ckpt


def finetune(config: RunConfig, recon_ckpt, pred_ckpt, out=None) -> Checkpoint:
    """Stage 3: both networks jointly at the reduced finetuning learning rate."""
    config = config.replace(stage="finetune")
    recon = _resolve(recon_ckpt).require("recon").recon
    pred = _resolve(pred_ckpt).require("pred").pred
    _, batch = load_split(config, "train")
    result = fit_joint(recon, pred, batch.frames, batch.flows, config.k, config.optim(finetune=True))
    ckpt = Checkpoint(
        config=config,
        recon=recon,
        pred=pred,
        optimizer_state=result.optimizer.state_dict(),
        epoch=result.epochs,
        seeds={"seed": config.seed},
        history={"joint_loss": result.history},
    )
    save_checkpoint(ckpt, out or Path(config.out_dir) / "finetune")
    return ckpt


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    metrics: dict
    dump_path: Path | None = None
    plots: dict = field(default_factory=dict)


def _cues(config: RunConfig, ckpt: Checkpoint, batch: STCBatch, seed_offset: int, return_maps=False):
    gen = torch.Generator().manual_seed(config.seed + seed_offset)
    return stc_cues(
        ckpt.recon,
        ckpt.pred,
        batch.frames,
        batch.flows,
        config.k,
        config.sample_mode,
        gen,
        return_maps=return_maps,
    )


def training_scores(config: RunConfig, ckpt: Checkpoint, ckpt_path=None):
    """Raw training cues for the normalization statistics, cached in the checkpoint."""
    context = {"k": config.k, "sample_mode": config.sample_mode, "seed": config.seed}
    if ckpt.train_scores is not None and ckpt.history.get("score_context") == context:
        return ckpt.train_scores
    _, batch = load_split(config, "train")
    ckpt.train_scores = _cues(config, ckpt, batch, seed_offset=1)
    ckpt.stats = fit_stats(*ckpt.train_scores, config.w_r, config.w_p)
    ckpt.history["score_context"] = context
    if ckpt_path is not None:
        save_checkpoint(ckpt, ckpt_path)
    return ckpt.train_scores


def frame_series(config, manifest, batch: STCBatch, scores, empty_value):
    """Pooled, optionally per-video normalized, and smoothed frame scores per video."""
    out = {}
    vids = np.asarray(batch.video_ids)
    for vid in manifest.video_ids:
        sel = vids == vid
        n = len(manifest[vid].frames)
        if n <= config.t:
            continue
        pooled = pool_video(batch.target_index[sel], scores[sel], n, config.t, empty_value)
        if config.score_norm == "per_video":
            pooled = minmax(pooled)
        out[vid] = (pooled, median_smooth(pooled, config.smooth_window))
    return out


def _labels(manifest, vid, t):
    labels = manifest[vid].labels
    return None if labels is None else np.asarray(labels[t:], dtype=int)


def _auroc_report(manifest, series, t):
    if any(manifest[v].labels is None for v in series):
        return None, None
    scores = np.concatenate([s for _, s in series.values()])
    labels = np.concatenate([_labels(manifest, v, t) for v in series])
    per_video = per_video_auroc({v: (s, _labels(manifest, v, t)) for v, (_, s) in series.items()})
    return auroc(scores, labels), per_video


def _dump_records(manifest, batch, series, s_r, s_p, fused, t):
    vids = np.asarray(batch.video_ids)
    for vid, (pooled, smoothed) in series.items():
        sel = np.flatnonzero(vids == vid)
        best = {}
        for i in sel:
            f = int(batch.target_index[i])
            if f not in best or fused[i] > fused[best[f]]:
                best[f] = i
        labels = _labels(manifest, vid, t)
        for j, (p, s) in enumerate(zip(pooled, smoothed)):
            f = t + j
            i = best.get(f)
            yield {
                "video_id": vid,
                "frame_index": f,
                "s_r": None if i is None else float(s_r[i]),
                "s_p": None if i is None else float(s_p[i]),
                "fused": float(p),
                "smoothed": float(s),
                "label": None if labels is None else int(labels[j]),
            }


def _heatmaps(manifest, batch, series, maps, t, out_dir):
    """Error heat map at the highest-scoring frame of every video."""
    vids = np.asarray(batch.video_ids)
    out = {}
    for vid, (_, smoothed) in series.items():
        f = t + int(np.argmax(smoothed))
        sel = np.flatnonzero((vids == vid) & (batch.target_index == f))
        frame = load_frame(manifest.resolve(manifest[vid].frames[f]))
        gray = frame.mean(0)
        canvas = plots.paste_error_maps(gray.shape, maps[sel], batch.boxes[sel])
        out[vid] = plots.plot_error_heatmap(vid, f, gray, canvas, batch.boxes[sel], out_dir / f"heatmap_{vid}")
    return out


def evaluate(config: RunConfig, ckpt, out_dir=None, make_plots: bool = True) -> EvalResult:
    """Score the test split, write the score dump, metrics and plots."""
    config = config.replace(stage="eval")
    ckpt_path = Path(ckpt) if isinstance(ckpt, (str, Path)) else None
    ckpt = _resolve(ckpt).require("recon", "pred")
    out_dir = Path(out_dir or Path(config.out_dir) / "eval")
    out_dir.mkdir(parents=True, exist_ok=True)

    train_r, train_p = training_scores(config, ckpt, ckpt_path)
    manifest, batch = load_split(config, "test")
    s_r, s_p, maps = _cues(config, ckpt, batch, seed_offset=0, return_maps=True)

    settings = {"hybrid": (config.w_r, config.w_p), **ABLATIONS}
    metrics = {"k": config.k, "sample_mode": config.sample_mode, "n_stcs": len(batch)}
    metrics["auroc"], metrics["per_video_auroc"], metrics["weights"] = {}, {}, {}
    for name, (w_r, w_p) in settings.items():
        stats = fit_stats(train_r, train_p, w_r, w_p)
        fused = np.atleast_1d(fuse(s_r, s_p, stats))
        series = frame_series(config, manifest, batch, fused, stats.train_min)
        overall, per_video = _auroc_report(manifest, series, config.t)
        metrics["auroc"][name] = overall
        metrics["per_video_auroc"][name] = per_video
        metrics["weights"][name] = [w_r, w_p]
        if name == "hybrid":
            metrics["score_stats"] = stats.to_dict()
            hybrid = (fused, series)
    if metrics["auroc"]["hybrid"] is None:
        logger.warning("test manifest has no labels; metrics skipped")

    fused, series = hybrid
    dump = out_dir / "scores.jsonl"
    write_score_dump(dump, _dump_records(manifest, batch, series, s_r, s_p, fused, config.t))
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    save_config(config, out_dir / "config.json")

    result = EvalResult(metrics=metrics, dump_path=dump)
    if make_plots:
        result.plots["curves"] = plots.plot_score_dump(dump, out_dir / "plots")
        result.plots["heatmaps"] = _heatmaps(manifest, batch, series, maps, config.t, out_dir / "plots")
    logger.info("AUROC %s", metrics["auroc"])
    return result


def k_sweep(config: RunConfig, recon_ckpt, ks=None, out_dir=None) -> dict[int, float | None]:
    """Train and evaluate the predictor once per reconstructed-flow count."""
    recon_ckpt = _resolve(recon_ckpt)
    if recon_ckpt.recon is None:
        raise FormatError("k sweep needs a reconstruction checkpoint")
    ks = list(ks or range(1, config.t + 1))
    out_dir = Path(out_dir or Path(config.out_dir) / "k_sweep")
    result = {}
    for k in ks:
        cfg = config.replace(recon_flow_count=k)
        ckpt = train_pred(cfg, recon_ckpt, out=False)
        res = evaluate(cfg, ckpt, out_dir / f"k{k}", make_plots=False)
        result[k] = res.metrics["auroc"]["hybrid"]
        logger.info("k=%d AUROC %s", k, result[k])
    with open(out_dir / "sweep.json", "w") as fh:
        json.dump({str(k): v for k, v in result.items()}, fh, indent=2)
    return result
