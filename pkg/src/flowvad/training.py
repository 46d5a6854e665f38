"""Optimization loops for the three-stage schedule and batched inference helpers.

All loops are single-stream and deterministic for a fixed seed: batches are
drawn from a seeded permutation and no worker processes are used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .prednet import PredModel, total_pred_loss
from .reconnet import ReconModel, total_recon_loss

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    return torch.Generator().manual_seed(seed)


def lr_at_epoch(epoch: int, lr: float, decay: float = 0.8, step: int = 50) -> float:
    """Step schedule: ``lr * decay ** (epoch // step)``."""
    return lr * decay ** (epoch // step)


def make_optimizer(params, lr: float, betas=(0.9, 0.999), decay: float = 0.8, step: int = 50):
    opt = torch.optim.Adam(params, lr=lr, betas=tuple(betas))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=step, gamma=decay)
    return opt, sched


def batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    scheduler: object = None
    epochs: int = 0


@dataclass
class OptimConfig:
    epochs: int = 80
    batch_size: int = 128
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    lr_decay: float = 0.8
    lr_step: int = 50
    seed: int = 0


def as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.float()
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def flat_flows(flows) -> torch.Tensor:
    """``(n, t, 2, H, W)`` -> ``(n, 2t, H, W)``; 4-D input passes through."""
    f = as_tensor(flows)
    return f.reshape(f.shape[0], -1, *f.shape[-2:]) if f.dim() == 5 else f


def flat_frames(frames) -> torch.Tensor:
    """``(n, t+1, C, H, W)`` -> previous frames ``(n, tC, H, W)`` and target ``(n, C, H, W)``."""
    f = as_tensor(frames)
    prev = f[:, :-1]
    return prev.reshape(prev.shape[0], -1, *prev.shape[-2:]), f[:, -1]


def mix_flows(original: torch.Tensor, reconstructed: torch.Tensor, k: int, t: int) -> torch.Tensor:
    """Original flows ``1..t-k`` followed by reconstructed flows ``t-k+1..t`` (flat layout)."""
    if not 0 <= k <= t:
        raise ValueError(f"reconstructed flow count {k} outside 0..{t}")
    per = original.shape[1] // t
    cut = (t - k) * per
    return torch.cat([original[:, :cut], reconstructed[:, cut:]], dim=1)


# --------------------------------------------------------------------------- stages


def fit_recon(model: ReconModel, flows, opt_cfg: OptimConfig, log_every: int = 1) -> TrainResult:
    """Minimize the weighted reconstruction + entropy loss over flow cubes."""
    y = flat_flows(flows)
    gen = seed_everything(opt_cfg.seed)
    opt, sched = make_optimizer(model.parameters(), opt_cfg.lr, opt_cfg.betas, opt_cfg.lr_decay, opt_cfg.lr_step)
    cfg = model.config
    result = TrainResult(optimizer=opt, scheduler=sched)
    model.train()
    for epoch in range(opt_cfg.epochs):
        total, count = 0.0, 0
        for idx in batches(len(y), opt_cfg.batch_size, gen):
            yb = y[idx]
            out = model(yb)
            loss = total_recon_loss(yb, out, cfg.lambda_recon, cfg.lambda_ent, cfg.entropy_reduction)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        result.history.append(total / count)
        result.epochs += 1
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("recon epoch %d loss %.6f", epoch + 1, result.history[-1])
    return result


@torch.no_grad()
def reconstruct(model: ReconModel, flows, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    y = flat_flows(flows)
    return torch.cat([model(y[i : i + batch_size]).y_hat for i in range(0, len(y), batch_size)])


def fit_pred(
    pred: PredModel,
    frames,
    cond_flows,
    opt_cfg: OptimConfig,
    log_every: int = 1,
) -> TrainResult:
    """Train the CVAE on fixed conditioning flows (the reconstruction net stays frozen)."""
    prev, target = flat_frames(frames)
    flows = flat_flows(cond_flows)
    gen = seed_everything(opt_cfg.seed)
    opt, sched = make_optimizer(pred.parameters(), opt_cfg.lr, opt_cfg.betas, opt_cfg.lr_decay, opt_cfg.lr_step)
    cfg = pred.config
    result = TrainResult(optimizer=opt, scheduler=sched)
    pred.train()
    for epoch in range(opt_cfg.epochs):
        total, count = 0.0, 0
        for idx in batches(len(prev), opt_cfg.batch_size, gen):
            out = pred(prev[idx], flows[idx], mode="stochastic", generator=gen)
            loss = total_pred_loss(target[idx], out, cfg.lambda_cvae, cfg.lambda_gd)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        result.history.append(total / count)
        result.epochs += 1
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("pred epoch %d loss %.6f", epoch + 1, result.history[-1])
    return result


def joint_loss(recon: ReconModel, pred: PredModel, y, prev, target, k: int, generator=None):
    """Reconstruction-stage loss plus prediction-stage loss on one batch."""
    rc, pc = recon.config, pred.config
    out_r = recon(y)
    loss_r = total_recon_loss(y, out_r, rc.lambda_recon, rc.lambda_ent, rc.entropy_reduction)
    cond = mix_flows(y, out_r.y_hat, k, pc.t)
    out_p = pred(prev, cond, mode="stochastic", generator=generator)
    loss_p = total_pred_loss(target, out_p, pc.lambda_cvae, pc.lambda_gd)
    return loss_r + loss_p, loss_r, loss_p


def fit_joint(
    recon: ReconModel,
    pred: PredModel,
    frames,
    flows,
    k: int,
    opt_cfg: OptimConfig,
    log_every: int = 1,
) -> TrainResult:
    """End-to-end finetuning of both networks."""
    y = flat_flows(flows)
    prev, target = flat_frames(frames)
    gen = seed_everything(opt_cfg.seed)
    params = list(recon.parameters()) + list(pred.parameters())
    opt, sched = make_optimizer(params, opt_cfg.lr, opt_cfg.betas, opt_cfg.lr_decay, opt_cfg.lr_step)
    result = TrainResult(optimizer=opt, scheduler=sched)
    recon.train()
    pred.train()
    for epoch in range(opt_cfg.epochs):
        total, count = 0.0, 0
        for idx in batches(len(y), opt_cfg.batch_size, gen):
            loss, _, _ = joint_loss(recon, pred, y[idx], prev[idx], target[idx], k, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        result.history.append(total / count)
        result.epochs += 1
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("finetune epoch %d loss %.6f", epoch + 1, result.history[-1])
    return result


@torch.no_grad()
def predict_frames(
    pred: PredModel,
    frames,
    cond_flows,
    mode: str = "deterministic",
    generator=None,
    batch_size: int = 256,
) -> torch.Tensor:
    pred.eval()
    prev, _ = flat_frames(frames)
    flows = flat_flows(cond_flows)
    outs = []
    for i in range(0, len(prev), batch_size):
        outs.append(pred(prev[i : i + batch_size], flows[i : i + batch_size], mode=mode, generator=generator).x_hat)
    return torch.cat(outs)


@torch.no_grad()
def stc_cues(
    recon: ReconModel,
    pred: PredModel,
    frames,
    flows,
    k: int,
    mode: str = "deterministic",
    generator=None,
    batch_size: int = 256,
    return_maps: bool = False,
):
    """Per-STC flow-reconstruction and frame-prediction errors.

    Returns ``(s_r, s_p)`` as float64 arrays, plus the per-pixel squared
    prediction error ``(n, H, W)`` (channel mean) when ``return_maps``.
    """
    recon.eval()
    pred.eval()
    y = flat_flows(flows)
    prev, target = flat_frames(frames)
    s_r, s_p, maps = [], [], []
    for i in range(0, len(y), batch_size):
        yb = y[i : i + batch_size]
        y_hat = recon(yb).y_hat
        cond = mix_flows(yb, y_hat, k, pred.config.t)
        x_hat = pred(prev[i : i + batch_size], cond, mode=mode, generator=generator).x_hat
        err = (x_hat - target[i : i + batch_size]) ** 2
        s_r.append(((y_hat - yb) ** 2).flatten(1).mean(1))
        s_p.append(err.flatten(1).mean(1))
        if return_maps:
            maps.append(err.mean(1))
    s_r = torch.cat(s_r).double().numpy()
    s_p = torch.cat(s_p).double().numpy()
    if return_maps:
        return s_r, s_p, torch.cat(maps).numpy()
    return s_r, s_p
