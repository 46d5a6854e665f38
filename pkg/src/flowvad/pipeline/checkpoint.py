"""Checkpoints as a directory: ``meta.json`` plus one tensor file per tensor.

Every tensor (model parameters and buffers, optimizer moments, cached
training scores) is stored in the float32 tensor-file format.  Tensors of
other dtypes, such as the integer batch-norm step counters, are cast to
float32 on save and cast back on load; the recorded dtype makes the
round trip exact for the values that occur in practice.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import CorruptionError, FormatError
from ..prednet import PredConfig, PredModel
from ..reconnet import ReconConfig, ReconModel
from ..scoring import ScoreStats
from ..tensorstore import read_tensor, write_tensor
from .config import RunConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META = "meta.json"


@dataclass
class Checkpoint:
    config: RunConfig
    recon: ReconModel | None = None
    pred: PredModel | None = None
    optimizer_state: dict | None = None
    epoch: int = 0
    seeds: dict = field(default_factory=dict)
    stats: ScoreStats | None = None
    train_scores: tuple | None = None  # (s_r, s_p) over training STCs
    history: dict = field(default_factory=dict)

    def require(self, *parts: str) -> "Checkpoint":
        missing = [p for p in parts if getattr(self, p) is None]
        if missing:
            raise FormatError(f"checkpoint lacks {', '.join(missing)}")
        return self


def _dtype_name(t: torch.Tensor) -> str:
    return str(t.dtype).replace("torch.", "")


def _save_tensors(tensors: dict, folder: Path) -> dict:
    folder.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, (name, t) in enumerate(tensors.items()):
        fname = f"{i:04d}.hf2t"
        t = t.detach().cpu()
        write_tensor(t.to(torch.float32).numpy(), folder / fname)
        index[name] = {"file": fname, "dtype": _dtype_name(t), "shape": list(t.shape)}
    return index


def _load_tensors(index: dict, folder: Path) -> dict:
    out = {}
    for name, entry in index.items():
        arr = read_tensor(folder / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise CorruptionError(f"{folder / entry['file']}: shape {arr.shape} != {entry['shape']}")
        out[name] = torch.from_numpy(arr).to(getattr(torch, entry["dtype"]))
    return out


def _optimizer_tensors(state: dict) -> tuple[dict, dict]:
    """Split an optimizer state dict into a JSON part and a flat tensor dict."""
    tensors, layout = {}, {}
    for pid, slot in state["state"].items():
        layout[str(pid)] = {}
        for key, value in slot.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{pid}.{key}"] = value
                layout[str(pid)][key] = None
            else:
                layout[str(pid)][key] = value
    return {"param_groups": state["param_groups"], "state": layout}, tensors


def _optimizer_state(meta: dict, tensors: dict) -> dict:
    state = {}
    for pid, slot in meta["state"].items():
        state[int(pid)] = {
            key: tensors[f"{pid}.{key}"] if value is None else value for key, value in slot.items()
        }
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``ckpt`` to directory ``path`` (replaced if it exists)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "seeds": ckpt.seeds,
        "history": ckpt.history,
        "tensors": {},
    }
    if ckpt.recon is not None:
        meta["recon_config"] = ckpt.recon.config.to_dict()
        meta["tensors"]["recon"] = _save_tensors(ckpt.recon.state_dict(), tmp / "recon")
    if ckpt.pred is not None:
        meta["pred_config"] = ckpt.pred.config.to_dict()
        meta["tensors"]["pred"] = _save_tensors(ckpt.pred.state_dict(), tmp / "pred")
    if ckpt.optimizer_state is not None:
        opt_meta, opt_tensors = _optimizer_tensors(ckpt.optimizer_state)
        meta["optimizer"] = opt_meta
        meta["tensors"]["optimizer"] = _save_tensors(opt_tensors, tmp / "optimizer")
    if ckpt.stats is not None:
        meta["score_stats"] = ckpt.stats.to_dict()
    if ckpt.train_scores is not None:
        s_r, s_p = (torch.as_tensor(np.asarray(s, dtype=np.float32)) for s in ckpt.train_scores)
        meta["tensors"]["train_scores"] = _save_tensors({"s_r": s_r, "s_p": s_p}, tmp / "train_scores")
    with open(tmp / META, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    logger.info("saved checkpoint to %s", path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta_path = path / META
    if not meta_path.is_file():
        raise FormatError(f"{path} is not a checkpoint directory (no {META})")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('format_version')}")
    index = meta["tensors"]
    ckpt = Checkpoint(
        config=RunConfig.from_dict(meta["config"]),
        epoch=meta["epoch"],
        seeds=meta.get("seeds", {}),
        history=meta.get("history", {}),
    )
    if "recon" in index:
        ckpt.recon = ReconModel(ReconConfig.from_dict(meta["recon_config"]))
        ckpt.recon.load_state_dict(_load_tensors(index["recon"], path / "recon"))
    if "pred" in index:
        ckpt.pred = PredModel(PredConfig.from_dict(meta["pred_config"]))
        ckpt.pred.load_state_dict(_load_tensors(index["pred"], path / "pred"))
    if "optimizer" in index:
        ckpt.optimizer_state = _optimizer_state(
            meta["optimizer"], _load_tensors(index["optimizer"], path / "optimizer")
        )
    if "score_stats" in meta:
        ckpt.stats = ScoreStats.from_dict(meta["score_stats"])
    if "train_scores" in index:
        t = _load_tensors(index["train_scores"], path / "train_scores")
        ckpt.train_scores = (t["s_r"].double().numpy(), t["s_p"].double().numpy())
    return ckpt
