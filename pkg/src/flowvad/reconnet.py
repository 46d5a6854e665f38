"""Multi-level memory-augmented autoencoder with skip connections.

Levels are numbered from the input side: level 1 works at full resolution,
level ``L`` is the bottleneck.  Every encoder level is two conv blocks
followed by a stride-2 convolution; every decoder level upsamples with a
stride-2 deconvolution, optionally concatenates the encoder skip of that
level, then applies two conv blocks and optionally a memory bank.  A skip at
level 1 is never allowed: it lets the decoder bypass every memory.

The six architecture variants ``a``..``f`` place memories and skips as
follows (``L`` levels, bottleneck = level ``L``)::

    a  memae               memories {L}              skips {}
    b  ml_memae            memories {L, ..., 1}      skips {}
    c  memae_sc_all        memories {L}              skips {L-1, ..., 2}
    d  ml_memae_sc_all     memories {L, ..., 1}      skips {L-1, ..., 2}
    e  two_mem_one_skip    memories {L, L-1}         skips {L-1}
    f  three_mem_two_skip  memories {L, L-1, L-2}    skips {L-1, L-2}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .memaddr import MemoryBank, entropy_loss

VARIANT_NAMES = {
    "a": "memae",
    "b": "ml_memae",
    "c": "memae_sc_all",
    "d": "ml_memae_sc_all",
    "e": "two_mem_one_skip",
    "f": "three_mem_two_skip",
}
_ALIASES = {v: k for k, v in VARIANT_NAMES.items()}


def _variant_layout(variant: str, levels: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Memory and skip levels (1-based, input side first) of a named variant."""
    L = levels
    every = tuple(range(L, 0, -1))
    inner = tuple(range(L - 1, 1, -1))
    memory_levels, skip_levels = {
        "a": ((L,), ()),
        "b": (every, ()),
        "c": ((L,), inner),
        "d": (every, inner),
        "e": ((L, L - 1), (L - 1,)),
        "f": ((L, L - 1, L - 2), (L - 1, L - 2)),
    }[variant]
    if any(l < 1 for l in memory_levels):
        raise ConfigError(f"variant {variant} needs more than {levels} levels")
    if any(l < 2 for l in skip_levels):
        raise ConfigError(f"variant {variant} would need an outermost skip with {levels} levels")
    return memory_levels, skip_levels


@dataclass
class ReconConfig:
    variant: str = "f"
    in_channels: int = 8
    levels: int = 4
    base_channels: tuple[int, ...] = (32, 64, 128, 256)
    num_slots: int = 2000
    lambda_recon: float = 1.0
    lambda_ent: float = 2e-4
    temperature: float = 1.0
    shrink_threshold: float | None = None
    entropy_reduction: str = "mean"
    memory_levels: tuple[int, ...] | None = None
    skip_levels: tuple[int, ...] | None = None
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.variant = _ALIASES.get(self.variant, self.variant)
        if self.variant not in VARIANT_NAMES and self.variant != "custom":
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.levels < 2:
            raise ConfigError("need at least 2 levels")
        self.base_channels = tuple(int(c) for c in self.base_channels)
        if len(self.base_channels) != self.levels:
            raise ConfigError(
                f"{len(self.base_channels)} base channels given for {self.levels} levels"
            )
        if self.lambda_recon < 0 or self.lambda_ent < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.variant == "custom":
            mem = tuple(self.memory_levels or ())
            skips = tuple(self.skip_levels or ())
        else:
            mem, skips = _variant_layout(self.variant, self.levels)
            if self.memory_levels is not None and tuple(self.memory_levels) != mem:
                raise ConfigError(f"variant {self.variant} fixes memory levels {mem}")
            if self.skip_levels is not None and tuple(self.skip_levels) != skips:
                raise ConfigError(f"variant {self.variant} fixes skip levels {skips}")
        if 1 in skips:
            raise ConfigError("a skip connection at the outermost level is not allowed")
        if any(l < 1 or l > self.levels for l in mem):
            raise ConfigError(f"memory levels {mem} outside 1..{self.levels}")
        if any(l < 2 or l >= self.levels for l in skips):
            raise ConfigError(f"skip levels {skips} outside 2..{self.levels - 1}")
        self.memory_levels = tuple(sorted(set(mem), reverse=True))
        self.skip_levels = tuple(sorted(set(skips), reverse=True))

    @property
    def num_memories(self) -> int:
        return len(self.memory_levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        d["memory_levels"] = list(self.memory_levels)
        d["skip_levels"] = list(self.skip_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        d = dict(d)
        for key in ("base_channels", "memory_levels", "skip_levels"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("variant") != "custom":
            d["memory_levels"] = d["skip_levels"] = None
        return cls(**d)


class ReconOutput(NamedTuple):
    y_hat: torch.Tensor
    weight_maps: list
    features: dict


def conv_block(cin: int, cout: int, momentum: float = 0.1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout, momentum=momentum),
        nn.ReLU(inplace=True),
    )


def down_block(cin: int, cout: int, momentum: float = 0.1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout, momentum=momentum),
        nn.ReLU(inplace=True),
    )


def up_block(cin: int, cout: int, momentum: float = 0.1) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1, bias=False),
        nn.BatchNorm2d(cout, momentum=momentum),
        nn.ReLU(inplace=True),
    )


class ReconModel(nn.Module):
    """Memory-augmented flow (or image) reconstruction network."""

    def __init__(self, config: ReconConfig):
        super().__init__()
        self.config = config
        ch = config.base_channels
        L = config.levels
        m = config.bn_momentum

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        cin = config.in_channels
        for l in range(1, L):
            self.enc_blocks.append(nn.Sequential(conv_block(cin, ch[l - 1], m), conv_block(ch[l - 1], ch[l - 1], m)))
            self.downs.append(down_block(ch[l - 1], ch[l], m))
            cin = ch[l]
        self.bottleneck = nn.Sequential(conv_block(cin, ch[L - 1], m), conv_block(ch[L - 1], ch[L - 1], m))

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for l in range(L - 1, 0, -1):
            self.ups.append(up_block(ch[l], ch[l - 1], m))
            dec_in = ch[l - 1] * (2 if l in config.skip_levels else 1)
            self.dec_blocks.append(nn.Sequential(conv_block(dec_in, ch[l - 1], m), conv_block(ch[l - 1], ch[l - 1], m)))
        self.head = nn.Conv2d(ch[0], config.in_channels, 3, padding=1)

        self.memories = nn.ModuleDict(
            {
                str(l): MemoryBank(
                    config.num_slots,
                    ch[l - 1],
                    temperature=config.temperature,
                    shrink_threshold=config.shrink_threshold,
                )
                for l in config.memory_levels
            }
        )

    def forward(self, y: torch.Tensor, return_features: bool = False) -> ReconOutput:
        L = self.config.levels
        if y.dim() != 4 or y.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected (B, {self.config.in_channels}, H, W), got {tuple(y.shape)}"
            )
        factor = 2 ** (L - 1)
        if y.shape[-1] % factor or y.shape[-2] % factor:
            raise ShapeError(f"spatial size {tuple(y.shape[-2:])} not divisible by {factor}")
        features = {}
        skips = {}
        weight_maps = []
        h = y
        for l in range(1, L):
            h = self.enc_blocks[l - 1](h)
            skips[l] = h
            if return_features:
                features[f"enc{l}"] = h
            h = self.downs[l - 1](h)
        h = self.bottleneck(h)
        if return_features:
            features[f"enc{L}"] = h
        h = self._memory(L, h, weight_maps)
        for i, l in enumerate(range(L - 1, 0, -1)):
            h = self.ups[i](h)
            if l in self.config.skip_levels:
                h = torch.cat([h, skips[l]], dim=1)
            h = self.dec_blocks[i](h)
            if return_features:
                features[f"dec{l}"] = h
            h = self._memory(l, h, weight_maps)
        return ReconOutput(self.head(h), weight_maps, features)

    def _memory(self, level: int, h: torch.Tensor, weight_maps: list) -> torch.Tensor:
        bank = self.memories[str(level)] if str(level) in self.memories else None
        if bank is None:
            return h
        h, w = bank(h)
        weight_maps.append(w)
        return h

    def level_shapes(self, input_hw=(32, 32)) -> list[tuple[int, int, int]]:
        """Encoder feature sizes ``(H, W, C)`` per level for an input of ``input_hw``."""
        was_training = self.training
        self.eval()
        with torch.no_grad():
            x = torch.zeros(1, self.config.in_channels, *input_hw)
            feats = self.forward(x, return_features=True).features
        self.train(was_training)
        return [
            (f.shape[2], f.shape[3], f.shape[1])
            for f in (feats[f"enc{l}"] for l in range(1, self.config.levels + 1))
        ]


def build(config: ReconConfig) -> ReconModel:
    return ReconModel(config)


def recon_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error over all elements."""
    if y.shape != y_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    return ((y - y_hat) ** 2).mean()


def total_recon_loss(
    y: torch.Tensor,
    out: ReconOutput,
    lambda_recon: float = 1.0,
    lambda_ent: float = 2e-4,
    spatial_reduction: str = "mean",
) -> torch.Tensor:
    if lambda_recon < 0 or lambda_ent < 0:
        raise ConfigError("loss weights must be non-negative")
    loss = lambda_recon * recon_loss(y, out.y_hat)
    if lambda_ent and out.weight_maps:
        loss = loss + lambda_ent * entropy_loss(out.weight_maps, spatial_reduction)
    return loss


def flatten_flow_cube(flows: torch.Tensor) -> torch.Tensor:
    """``(B, t, 2, H, W)`` flow cubes -> ``(B, 2t, H, W)``."""
    b, t, c, h, w = flows.shape
    return flows.reshape(b, t * c, h, w)


def unflatten_flow_cube(flat: torch.Tensor, t: int) -> torch.Tensor:
    b, tc, h, w = flat.shape
    return flat.reshape(b, t, tc // t, h, w)
