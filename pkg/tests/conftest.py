import json

import pytest
import torch

from flowvad.synthlab import SynthConfig, gen_synthetic

torch.set_num_threads(1)

# lines reported by the acceptance module, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_SYNTH = dict(seed=3, height=64, width=64, sprites_per_video=2, sprite_size=(8, 12), video_length=12, n_train=2, n_test=2, anomaly_length=(4, 5))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two short train and test videos at 64x64."""
    root = tmp_path_factory.mktemp("tiny")
    gen_synthetic(SynthConfig(**TINY_SYNTH), root)
    return root


@pytest.fixture
def tiny_run_config(tiny_dataset, tmp_path):
    from flowvad.pipeline import RunConfig

    return RunConfig(
        data_dir=str(tiny_dataset),
        out_dir=str(tmp_path / "run"),
        epochs=1,
        batch_size=16,
        lr=1e-3,
        finetune_epochs=1,
        recon={"base_channels": [4, 4, 4, 4], "num_slots": 8},
        pred={"base_channels": [4, 4, 4, 4], "z_channels": 2},
    )


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
