"""Flow-conditioned CVAE that predicts the next frame of an STC.

Two encoders share one layout: the prior encoder sees the (reconstructed)
flow cube, the posterior encoder sees the previous frames concatenated with
the same flows.  The deepest ``latent_levels`` levels carry a spatial latent
``z`` whose Gaussian parameters come from 1x1 heads on the encoder features.
The decoder upsamples with sub-pixel convolutions; at latent levels it
concatenates ``z`` with the prior-encoder features, elsewhere it concatenates
the posterior-encoder features (U-Net style skips).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class PredConfig:
    t: int = 4
    frame_channels: int = 1
    levels: int = 4
    base_channels: tuple[int, ...] = (64, 128, 128, 128)
    z_channels: int = 64
    latent_levels: int = 2
    lambda_cvae: float = 1.0
    lambda_gd: float = 1.0
    sample_mode: str = "deterministic"
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.t < 1:
            raise ConfigError("t must be >= 1")
        self.base_channels = tuple(int(c) for c in self.base_channels)
        if len(self.base_channels) != self.levels:
            raise ConfigError(
                f"{len(self.base_channels)} base channels given for {self.levels} levels"
            )
        if not 1 <= self.latent_levels <= self.levels:
            raise ConfigError(f"latent_levels must lie in 1..{self.levels}")
        if self.lambda_cvae < 0 or self.lambda_gd < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.sample_mode not in ("deterministic", "stochastic"):
            raise ConfigError(f"unknown sample_mode {self.sample_mode!r}")

    @property
    def flow_channels(self) -> int:
        return 2 * self.t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredConfig":
        d = dict(d)
        d["base_channels"] = tuple(d["base_channels"])
        return cls(**d)


@dataclass
class GaussianParams:
    """Diagonal Gaussians, one ``(mean, logvar)`` pair per latent level (deepest first)."""

    means: list
    logvars: list

    def __post_init__(self):
        if len(self.means) != len(self.logvars):
            raise ShapeError("means and logvars have different level counts")
        for m, lv in zip(self.means, self.logvars):
            if m.shape != lv.shape:
                raise ShapeError(f"mean {tuple(m.shape)} vs logvar {tuple(lv.shape)}")
        self.logvars = [lv.clamp(LOGVAR_MIN, LOGVAR_MAX) for lv in self.logvars]

    @classmethod
    def standard_normal_like(cls, means) -> "GaussianParams":
        return cls([torch.zeros_like(m) for m in means], [torch.zeros_like(m) for m in means])


class PredOutput(NamedTuple):
    x_hat: torch.Tensor
    prior: GaussianParams
    posterior: GaussianParams
    z: list


class ResBlock(nn.Module):
    """Pre-activation residual block: (BN, ReLU, conv3x3) x 2 plus identity."""

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.body = nn.Sequential(
            nn.BatchNorm2d(channels, momentum=momentum),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels, momentum=momentum),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class SubpixelUp(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout * 4, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class Encoder(nn.Module):
    def __init__(self, in_channels: int, channels, momentum: float = 0.1):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, channels[0], 3, padding=1)
        self.levels = nn.ModuleList([ResBlock(channels[0], momentum)])
        self.downs = nn.ModuleList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.downs.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
            self.levels.append(ResBlock(cout, momentum))

    def forward(self, x) -> list:
        feats = [self.levels[0](self.stem(x))]
        for down, block in zip(self.downs, self.levels[1:]):
            feats.append(block(down(feats[-1])))
        return feats


def _gaussian_head(cin: int, z_channels: int) -> nn.Conv2d:
    head = nn.Conv2d(cin, 2 * z_channels, 1)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    return head


class PredModel(nn.Module):
    def __init__(self, config: PredConfig):
        super().__init__()
        self.config = config
        ch = config.base_channels
        L = config.levels
        m = config.bn_momentum
        zc = config.z_channels
        self.latent = list(range(L, L - config.latent_levels, -1))  # 1-based levels

        self.prior_encoder = Encoder(config.flow_channels, ch, m)
        self.posterior_encoder = Encoder(
            config.flow_channels + config.t * config.frame_channels, ch, m
        )
        self.prior_heads = nn.ModuleDict({str(l): _gaussian_head(ch[l - 1], zc) for l in self.latent})
        self.posterior_heads = nn.ModuleDict({str(l): _gaussian_head(ch[l - 1], zc) for l in self.latent})

        self.dec_in = nn.ModuleDict()
        self.dec_blocks = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for l in range(L, 0, -1):
            up_ch = ch[l] if l < L else 0
            side = zc + ch[l - 1] if l in self.latent else ch[l - 1]
            if l < L:
                self.ups[str(l)] = SubpixelUp(ch[l], ch[l - 1])
                up_ch = ch[l - 1]
            self.dec_in[str(l)] = nn.Conv2d(up_ch + side, ch[l - 1], 3, padding=1)
            self.dec_blocks[str(l)] = ResBlock(ch[l - 1], m)
        self.head = nn.Sequential(
            nn.BatchNorm2d(ch[0], momentum=m), nn.ReLU(), nn.Conv2d(ch[0], config.frame_channels, 3, padding=1)
        )

    # --- encoders -------------------------------------------------------

    def _check(self, frames, flows):
        c = self.config
        if flows.dim() != 4 or flows.shape[1] != c.flow_channels:
            raise ShapeError(f"flows must be (B, {c.flow_channels}, H, W), got {tuple(flows.shape)}")
        if frames is not None:
            if frames.dim() != 4 or frames.shape[1] != c.t * c.frame_channels:
                raise ShapeError(
                    f"frames must be (B, {c.t * c.frame_channels}, H, W), got {tuple(frames.shape)}"
                )
            if frames.shape[-2:] != flows.shape[-2:] or frames.shape[0] != flows.shape[0]:
                raise ShapeError("frames and flows disagree in batch or spatial size")
        factor = 2 ** (c.levels - 1)
        if flows.shape[-1] % factor or flows.shape[-2] % factor:
            raise ShapeError(f"spatial size not divisible by {factor}")

    def _params(self, feats, heads) -> GaussianParams:
        means, logvars = [], []
        for l in self.latent:
            mu, lv = heads[str(l)](feats[l - 1]).chunk(2, dim=1)
            means.append(mu)
            logvars.append(lv)
        return GaussianParams(means, logvars)

    def encode_prior(self, flows: torch.Tensor):
        """Prior parameters and per-level condition features from the flow cube."""
        self._check(None, flows)
        feats = self.prior_encoder(flows)
        return self._params(feats, self.prior_heads), feats

    def encode_posterior(self, frames: torch.Tensor, flows: torch.Tensor):
        """Posterior parameters and per-level skip features from frames + flows."""
        self._check(frames, flows)
        feats = self.posterior_encoder(torch.cat([frames, flows], dim=1))
        return self._params(feats, self.posterior_heads), feats

    # --- decoder --------------------------------------------------------

    def decode(self, z: list, condition_features: list, skip_features: list) -> torch.Tensor:
        """Generate the next frame from latents (deepest first) and encoder features."""
        L = self.config.levels
        zs = dict(zip(self.latent, z))
        h = None
        for l in range(L, 0, -1):
            parts = [] if h is None else [self.ups[str(l)](h)]
            if l in zs:
                parts += [zs[l], condition_features[l - 1]]
            else:
                parts.append(skip_features[l - 1])
            h = self.dec_blocks[str(l)](self.dec_in[str(l)](torch.cat(parts, dim=1)))
        return torch.sigmoid(self.head(h))

    def forward(self, frames, flows, mode: str | None = None, generator=None) -> PredOutput:
        """``frames``: ``(B, t*C, H, W)`` previous frames; ``flows``: ``(B, 2t, H, W)``.

        Without an explicit ``mode`` the model samples stochastically while
        training and uses the configured ``sample_mode`` in eval mode.
        """
        if mode is None:
            mode = "stochastic" if self.training else self.config.sample_mode
        prior, cond = self.encode_prior(flows)
        posterior, skips = self.encode_posterior(frames, flows)
        z = sample(posterior, mode, generator)
        return PredOutput(self.decode(z, cond, skips), prior, posterior, z)

    def level_shapes(self, input_hw=(32, 32)) -> list[tuple[int, int, int]]:
        """Prior-encoder feature sizes ``(H, W, C)`` per level."""
        with torch.no_grad():
            was_training = self.training
            self.eval()
            feats = self.prior_encoder(torch.zeros(1, self.config.flow_channels, *input_hw))
            self.train(was_training)
        return [(f.shape[2], f.shape[3], f.shape[1]) for f in feats]


def build(config: PredConfig) -> PredModel:
    return PredModel(config)


def sample(params: GaussianParams, mode: str = "deterministic", generator=None) -> list:
    """Latents from ``params``: the means, or ``mean + exp(logvar/2) * eps``."""
    if mode == "deterministic":
        return list(params.means)
    if mode != "stochastic":
        raise ConfigError(f"unknown sample mode {mode!r}")
    out = []
    for mu, lv in zip(params.means, params.logvars):
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        out.append(mu + torch.exp(0.5 * lv) * eps)
    return out


def kl_loss(posterior: GaussianParams, prior: GaussianParams) -> torch.Tensor:
    """KL(posterior || prior), summed over latent dims and levels, averaged over batch."""
    if len(posterior.means) != len(prior.means):
        raise ShapeError("posterior and prior have different level counts")
    total = None
    for mq, lq, mp, lp in zip(posterior.means, posterior.logvars, prior.means, prior.logvars):
        if mq.shape != mp.shape:
            raise ShapeError(f"posterior {tuple(mq.shape)} vs prior {tuple(mp.shape)}")
        kl = 0.5 * (lp - lq + (lq.exp() + (mq - mp) ** 2) / lp.exp() - 1.0)
        kl = kl.reshape(kl.shape[0], -1).sum(dim=1) if kl.dim() > 1 else kl.sum().unsqueeze(0)
        total = kl if total is None else total + kl
    return total.mean()


def gradient_loss(x: torch.Tensor, x_hat: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Difference of absolute forward-difference image gradients.

    ``reduction="sum"`` adds both directional terms over rows, columns and
    channels; inputs with a batch axis (``(B, C, H, W)``) are summed per
    sample and averaged over the batch.  ``reduction="mean"`` divides that
    per-sample sum by the number of pixels, putting the term on the same
    per-element scale as :func:`pred_mse`.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() < 2:
        raise ShapeError("need at least two spatial axes")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    di = lambda a: (a[..., 1:, :] - a[..., :-1, :]).abs()  # noqa: E731
    dj = lambda a: (a[..., :, 1:] - a[..., :, :-1]).abs()  # noqa: E731
    gi = (di(x) - di(x_hat)).abs()
    gj = (dj(x) - dj(x_hat)).abs()
    if x.dim() == 4:
        b = x.shape[0]
        per_sample = gi.reshape(b, -1).sum(1) + gj.reshape(b, -1).sum(1)
        total = per_sample.mean()
        return total / x[0].numel() if reduction == "mean" else total
    total = gi.sum() + gj.sum()
    return total / x.numel() if reduction == "mean" else total


def pred_mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).mean()


def total_pred_loss(
    x_next: torch.Tensor, out: PredOutput, lambda_cvae: float = 1.0, lambda_gd: float = 1.0
) -> torch.Tensor:
    if lambda_cvae < 0 or lambda_gd < 0:
        raise ConfigError("loss weights must be non-negative")
    cvae = kl_loss(out.posterior, out.prior) + pred_mse(x_next, out.x_hat)
    return lambda_cvae * cvae + lambda_gd * gradient_loss(x_next, out.x_hat, reduction="mean")
