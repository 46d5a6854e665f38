"""Named run configurations.

``synth-desk`` is the reduced-width schedule used on the synthetic sprite
benchmark: small channel counts, a higher learning rate and a few epochs
per stage so that the full three-stage run fits in minutes on one core.
"""

from __future__ import annotations

PRESETS = {
    "synth-desk": {
        "lr": 2e-3,
        "batch_size": 64,
        "epochs": 10,
        "finetune_epochs": 5,
        "recon": {"base_channels": [16, 32, 64, 128], "num_slots": 500},
        "pred": {"base_channels": [16, 32, 32, 32], "z_channels": 16},
    },
    "paper": {},
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return {k: (dict(v) if isinstance(v, dict) else v) for k, v in PRESETS[name].items()}
