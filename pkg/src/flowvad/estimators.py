"""scikit-learn style wrappers around the reconstruction and prediction networks.

The estimators take plain arrays of spatio-temporal cubes:

* flows  ``(n, t, 2, H, W)`` (or flattened ``(n, 2t, H, W)``),
* frames ``(n, t+1, C, H, W)``, the last slice being the frame to predict.

They follow the usual conventions: hyperparameters are constructor
arguments stored verbatim, learned state ends with an underscore, ``fit``
returns ``self`` and ``score_samples`` is higher for more normal samples.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from .errors import InputError, ShapeError
from .prednet import PredConfig, PredModel
from .reconnet import ReconConfig, ReconModel
from .scoring import fit_stats, fuse
from .training import (
    OptimConfig,
    fit_joint,
    fit_pred,
    fit_recon,
    flat_flows,
    mix_flows,
    predict_frames,
    reconstruct,
    seed_everything,
    stc_cues,
)


# --------------------------------------------------------------------------- validation


def _finite_array(x, name: str) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float32)
    if arr.size == 0:
        raise InputError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains NaN or infinite values")
    return arr


def check_flow_cube(flows, t: int | None = None) -> np.ndarray:
    """Validate a batch of flow cubes; returns float32 ``(n, t, 2, H, W)``."""
    arr = _finite_array(flows, "flows")
    if arr.ndim == 4:
        if arr.shape[1] % 2:
            raise ShapeError(f"flattened flows need an even channel count, got {arr.shape[1]}")
        arr = arr.reshape(arr.shape[0], arr.shape[1] // 2, 2, *arr.shape[-2:])
    if arr.ndim != 5 or arr.shape[2] != 2:
        raise ShapeError(f"flows must be (n, t, 2, H, W), got {arr.shape}")
    if t is not None and arr.shape[1] != t:
        raise ShapeError(f"expected {t} flow slices, got {arr.shape[1]}")
    return arr


def check_frame_cube(frames, t: int | None = None) -> np.ndarray:
    """Validate a batch of frame cubes; returns float32 ``(n, t+1, C, H, W)``."""
    arr = _finite_array(frames, "frames")
    if arr.ndim == 4:  # grayscale without channel axis
        arr = arr[:, :, None]
    if arr.ndim != 5:
        raise ShapeError(f"frames must be (n, t+1, C, H, W), got {arr.shape}")
    if t is not None and arr.shape[1] != t + 1:
        raise ShapeError(f"expected {t + 1} frame slices, got {arr.shape[1]}")
    return arr


def check_stc_pair(frames, flows, t: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    flows = check_flow_cube(flows, t)
    frames = check_frame_cube(frames, flows.shape[1])
    if frames.shape[0] != flows.shape[0]:
        raise ShapeError(f"{frames.shape[0]} frame cubes vs {flows.shape[0]} flow cubes")
    if frames.shape[-2:] != flows.shape[-2:]:
        raise ShapeError("frames and flows differ in spatial size")
    return frames, flows


# --------------------------------------------------------------------------- estimators


class FlowReconstructor(TransformerMixin, BaseEstimator):
    """Memory-augmented flow autoencoder; ``transform`` returns reconstructed flows."""

    def __init__(
        self,
        variant="f",
        levels=4,
        base_channels=(32, 64, 128, 256),
        num_slots=2000,
        lambda_recon=1.0,
        lambda_ent=2e-4,
        temperature=1.0,
        shrink_threshold=None,
        epochs=80,
        batch_size=128,
        lr=1e-4,
        seed=0,
    ):
        self.variant = variant
        self.levels = levels
        self.base_channels = base_channels
        self.num_slots = num_slots
        self.lambda_recon = lambda_recon
        self.lambda_ent = lambda_ent
        self.temperature = temperature
        self.shrink_threshold = shrink_threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _config(self, in_channels: int) -> ReconConfig:
        return ReconConfig(
            variant=self.variant,
            in_channels=in_channels,
            levels=self.levels,
            base_channels=tuple(self.base_channels),
            num_slots=self.num_slots,
            lambda_recon=self.lambda_recon,
            lambda_ent=self.lambda_ent,
            temperature=self.temperature,
            shrink_threshold=self.shrink_threshold,
        )

    def _optim(self, epochs=None, lr=None) -> OptimConfig:
        return OptimConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            lr=self.lr if lr is None else lr,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_flow_cube(X)
        self.t_ = X.shape[1]
        seed_everything(self.seed)
        self.model_ = ReconModel(self._config(2 * self.t_))
        self.history_ = fit_recon(self.model_, X, self._optim(), log_every=0).history
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_flow_cube(X, self.t_)
        return reconstruct(self.model_, X).reshape(X.shape).numpy()

    def reconstruction_error(self, X) -> np.ndarray:
        """Per-sample mean squared flow reconstruction error."""
        X = check_flow_cube(X, getattr(self, "t_", None))
        return ((self.transform(X) - X) ** 2).reshape(len(X), -1).mean(1).astype(np.float64)

    def score_samples(self, X) -> np.ndarray:
        return -self.reconstruction_error(X)


class FramePredictor(BaseEstimator):
    """Flow-conditioned CVAE predicting the last frame of each cube."""

    def __init__(
        self,
        levels=4,
        base_channels=(64, 128, 128, 128),
        z_channels=64,
        latent_levels=2,
        lambda_cvae=1.0,
        lambda_gd=1.0,
        sample_mode="deterministic",
        epochs=80,
        batch_size=128,
        lr=1e-4,
        seed=0,
    ):
        self.levels = levels
        self.base_channels = base_channels
        self.z_channels = z_channels
        self.latent_levels = latent_levels
        self.lambda_cvae = lambda_cvae
        self.lambda_gd = lambda_gd
        self.sample_mode = sample_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _config(self, t: int, channels: int) -> PredConfig:
        return PredConfig(
            t=t,
            frame_channels=channels,
            levels=self.levels,
            base_channels=tuple(self.base_channels),
            z_channels=self.z_channels,
            latent_levels=self.latent_levels,
            lambda_cvae=self.lambda_cvae,
            lambda_gd=self.lambda_gd,
            sample_mode=self.sample_mode,
        )

    def _optim(self, epochs=None, lr=None) -> OptimConfig:
        return OptimConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            lr=self.lr if lr is None else lr,
            seed=self.seed,
        )

    def _build(self, frames, flows):
        self.t_ = flows.shape[1]
        self.n_channels_ = frames.shape[2]
        seed_everything(self.seed)
        self.model_ = PredModel(self._config(self.t_, self.n_channels_))

    def fit(self, frames, flows):
        """``flows`` are the conditioning flows (original or reconstructed)."""
        frames, flows = check_stc_pair(frames, flows)
        self._build(frames, flows)
        self.history_ = fit_pred(self.model_, frames, flows, self._optim(), log_every=0).history
        return self

    def predict(self, frames, flows, generator=None) -> np.ndarray:
        """Predicted last frames ``(n, C, H, W)``; ``frames`` may omit the target slice."""
        check_is_fitted(self, "model_")
        flows = check_flow_cube(flows, self.t_)
        frames = check_frame_cube(frames)
        if frames.shape[1] == self.t_:
            frames = np.concatenate([frames, frames[:, -1:]], axis=1)
        frames, flows = check_stc_pair(frames, flows, self.t_)
        return predict_frames(self.model_, frames, flows, self.sample_mode, generator).numpy()

    def prediction_error(self, frames, flows, generator=None) -> np.ndarray:
        frames, flows = check_stc_pair(frames, flows, getattr(self, "t_", None))
        x_hat = self.predict(frames, flows, generator)
        return ((x_hat - frames[:, -1]) ** 2).reshape(len(frames), -1).mean(1).astype(np.float64)

    def score_samples(self, frames, flows) -> np.ndarray:
        return -self.prediction_error(frames, flows)


class HybridDetector(BaseEstimator):
    """Reconstruction then prediction, fused into one anomaly score.

    ``fit`` runs the three-stage schedule on normal cubes: the reconstructor
    alone, the predictor on flows from the frozen reconstructor (the last
    ``recon_flow_count`` flows reconstructed, the rest original), then both
    jointly at ``finetune_lr_scale`` times the base learning rate.  The two
    error cues are then z-normalized with training statistics.
    """

    def __init__(
        self,
        reconstructor=None,
        predictor=None,
        recon_flow_count=None,
        finetune_epochs=20,
        finetune_lr_scale=0.1,
        w_r=1.0,
        w_p=1.0,
    ):
        self.reconstructor = reconstructor
        self.predictor = predictor
        self.recon_flow_count = recon_flow_count
        self.finetune_epochs = finetune_epochs
        self.finetune_lr_scale = finetune_lr_scale
        self.w_r = w_r
        self.w_p = w_p

    def _k(self, t: int) -> int:
        k = t if self.recon_flow_count is None else int(self.recon_flow_count)
        if not 0 <= k <= t:
            raise ValueError(f"recon_flow_count {k} outside 0..{t}")
        return k

    def fit(self, frames, flows):
        frames, flows = check_stc_pair(frames, flows)
        t = flows.shape[1]
        k = self._k(t)
        rec = FlowReconstructor() if self.reconstructor is None else clone(self.reconstructor)
        prd = FramePredictor() if self.predictor is None else clone(self.predictor)
        self.reconstructor_ = rec.fit(flows)

        y = flat_flows(flows)
        cond = mix_flows(y, reconstruct(self.reconstructor_.model_, flows), k, t)
        self.predictor_ = prd.fit(frames, cond.numpy())

        if self.finetune_epochs:
            opt = self.reconstructor_._optim(self.finetune_epochs, self.reconstructor_.lr * self.finetune_lr_scale)
            fit_joint(self.reconstructor_.model_, self.predictor_.model_, frames, flows, k, opt, log_every=0)

        s_r, s_p = self.cue_scores(frames, flows)
        self.stats_ = fit_stats(s_r, s_p, self.w_r, self.w_p)
        self.k_ = k
        return self

    def cue_scores(self, frames, flows, generator=None) -> tuple[np.ndarray, np.ndarray]:
        """Raw per-sample ``(S_r, S_p)``."""
        check_is_fitted(self, ["reconstructor_", "predictor_"])
        frames, flows = check_stc_pair(frames, flows, self.reconstructor_.t_)
        return stc_cues(
            self.reconstructor_.model_,
            self.predictor_.model_,
            frames,
            flows,
            self._k(flows.shape[1]),
            self.predictor_.sample_mode,
            generator,
        )

    def decision_function(self, frames, flows) -> np.ndarray:
        """Fused anomaly score; larger means more anomalous."""
        check_is_fitted(self, "stats_")
        s_r, s_p = self.cue_scores(frames, flows)
        return np.atleast_1d(fuse(s_r, s_p, self.stats_))

    def score_samples(self, frames, flows) -> np.ndarray:
        return -self.decision_function(frames, flows)

