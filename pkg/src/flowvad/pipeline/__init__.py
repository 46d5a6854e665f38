"""Training orchestration, checkpoints, evaluation and the command line."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .stages import evaluate, finetune, k_sweep, train_pred, train_recon

__all__ = [
    "Checkpoint",
    "RunConfig",
    "evaluate",
    "finetune",
    "k_sweep",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
    "train_pred",
    "train_recon",
]
