"""Run configuration: one flat record shared by every stage, loadable from JSON/YAML."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError
from ..prednet import PredConfig
from ..reconnet import ReconConfig
from ..tensorstore import data_root
from ..training import OptimConfig

STAGES = ("train_recon", "train_pred", "finetune", "eval", "toy", "synth_gen")


@dataclass
class RunConfig:
    stage: str = "train_recon"
    data_dir: str | None = None  # None -> $HF2VAD_DATA_DIR
    train_manifest: str = "train.jsonl"
    test_manifest: str = "test.jsonl"
    out_dir: str = "runs/default"
    t: int = 4
    stc_size: int = 32
    # optimizer / schedule
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    lr_decay: float = 0.8
    lr_step: int = 50
    batch_size: int = 128
    epochs: int = 80
    finetune_epochs: int = 20
    finetune_lr_scale: float = 0.1
    # models (field names of ReconConfig / PredConfig)
    recon: dict = field(default_factory=dict)
    pred: dict = field(default_factory=dict)
    # scoring
    w_r: float = 1.0
    w_p: float = 1.0
    recon_flow_count: int | None = None  # None -> t
    sample_mode: str = "deterministic"
    smooth_window: int = 17
    score_norm: str = "global"  # "global" | "per_video"
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        self.betas = tuple(float(b) for b in self.betas)
        if self.t < 1:
            raise ConfigError("t must be >= 1")
        if self.recon_flow_count is not None and not 1 <= self.recon_flow_count <= self.t:
            raise ConfigError(f"recon_flow_count must lie in 1..{self.t}")
        if self.sample_mode not in ("deterministic", "stochastic"):
            raise ConfigError(f"unknown sample_mode {self.sample_mode!r}")
        if self.score_norm not in ("global", "per_video"):
            raise ConfigError(f"unknown score_norm {self.score_norm!r}")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ConfigError("smooth_window must be odd and positive")
        if self.epochs < 0 or self.finetune_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        # fail early on bad model keys
        self.recon_config(channels=2)
        self.pred_config(channels=1)

    @property
    def k(self) -> int:
        return self.t if self.recon_flow_count is None else self.recon_flow_count

    @property
    def root(self) -> Path:
        return Path(self.data_dir) if self.data_dir else data_root()

    def manifest_path(self, split: str) -> Path:
        name = self.train_manifest if split == "train" else self.test_manifest
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    def recon_config(self, channels: int = 2) -> ReconConfig:
        try:
            return ReconConfig(in_channels=channels * self.t, **self.recon)
        except TypeError as exc:
            raise ConfigError(f"bad recon settings: {exc}") from None

    def pred_config(self, channels: int = 1) -> PredConfig:
        params = dict(sample_mode=self.sample_mode)
        params.update(self.pred)
        try:
            return PredConfig(t=self.t, frame_channels=channels, **params)
        except TypeError as exc:
            raise ConfigError(f"bad pred settings: {exc}") from None

    def optim(self, finetune: bool = False) -> OptimConfig:
        return OptimConfig(
            epochs=self.finetune_epochs if finetune else self.epochs,
            batch_size=self.batch_size,
            lr=self.lr * (self.finetune_lr_scale if finetune else 1.0),
            betas=self.betas,
            lr_decay=self.lr_decay,
            lr_step=self.lr_step,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, value in changes.items():
            if key in ("recon", "pred"):
                d[key] = {**d[key], **value}
            else:
                d[key] = value
        return RunConfig.from_dict(d)


def load_config(path) -> dict:
    """Read a JSON or YAML config file into a plain dict."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return data


def save_config(config: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
