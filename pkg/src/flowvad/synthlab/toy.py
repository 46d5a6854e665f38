"""Digit-2 normality toy: train reconstruction variants on one MNIST class only
and check how well reconstruction error separates the other nine classes.

MNIST is read from ``<root>/mnist`` where ``root`` defaults to
``$HF2VAD_DATA_DIR``.  Three layouts are accepted: the Keras ``mnist.npz``
archive (``x_train, y_train, x_test, y_test``), the pickled
``mnist.pkl.gz`` (train/valid/test splits of byte/256 floats; train and
valid are joined back into the 60k training set) or the four original IDX
files (optionally gzipped).
"""

from __future__ import annotations

import gzip
import json
import pickle
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..errors import ConfigError, DatasetError
from ..reconnet import VARIANT_NAMES, ReconConfig, ReconModel
from ..scoring import auroc
from ..tensorstore import data_root
from ..training import OptimConfig, fit_recon, seed_everything

logger = logging.getLogger(__name__)

NORMAL_DIGIT = 2
IDX_FILES = {
    "x_train": "train-images-idx3-ubyte",
    "y_train": "train-labels-idx1-ubyte",
    "x_test": "t10k-images-idx3-ubyte",
    "y_test": "t10k-labels-idx1-ubyte",
}


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:2] != b"\x00\x00" or raw[2] != 0x08:
        raise DatasetError(f"{path} is not an unsigned-byte IDX file")
    ndim = raw[3]
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(int)
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: payload does not match header dims {tuple(dims)}")
    return data.reshape(dims)


def _read_pickle(path: Path) -> dict[str, np.ndarray]:
    with gzip.open(path, "rb") as fh:
        train, valid, test = pickle.load(fh, encoding="latin1")

    def images(x):
        return np.round(np.asarray(x) * 256).clip(0, 255).astype(np.uint8).reshape(-1, 28, 28)

    return {
        "x_train": np.concatenate([images(train[0]), images(valid[0])]),
        "y_train": np.concatenate([train[1], valid[1]]).astype(np.int64),
        "x_test": images(test[0]),
        "y_test": np.asarray(test[1], dtype=np.int64),
    }


def load_mnist(root=None) -> dict[str, np.ndarray]:
    """MNIST as uint8 arrays keyed ``x_train, y_train, x_test, y_test``."""
    base = Path(root) if root is not None else data_root()
    folder = base / "mnist" if (base / "mnist").is_dir() else base
    npz = folder / "mnist.npz"
    if npz.is_file():
        with np.load(npz) as f:
            return {k: np.asarray(f[k]) for k in IDX_FILES}
    pkl = folder / "mnist.pkl.gz"
    if pkl.is_file():
        return _read_pickle(pkl)
    out = {}
    for key, stem in IDX_FILES.items():
        for cand in (folder / stem, folder / f"{stem}.gz"):
            if cand.is_file():
                out[key] = _read_idx(cand)
                break
        else:
            raise DatasetError(f"MNIST file {stem}[.gz] not found under {folder}")
    return out


def pad_digits(images) -> torch.Tensor:
    """``(n, 28, 28)`` uint8 -> ``(n, 1, 32, 32)`` float in [0, 1], zero border of 2 px."""
    x = torch.from_numpy(np.asarray(images, dtype=np.float32) / 255.0)
    return torch.nn.functional.pad(x, (2, 2, 2, 2)).unsqueeze(1)


@dataclass
class VariantResult:
    auroc: float
    mean_normal_error: float
    mean_abnormal_error: float
    grid: str | None = None

    @property
    def error_ratio(self) -> float:
        return self.mean_abnormal_error / self.mean_normal_error


@dataclass
class ToyReport:
    seed: int
    epochs: int
    subset_size: int
    config: dict
    variants: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name, res in self.variants.items():
            d["variants"][name]["error_ratio"] = res.error_ratio
        return d

    def to_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "ToyReport":
        with open(path) as fh:
            d = json.load(fh)
        variants = {}
        for k, v in d.pop("variants").items():
            v.pop("error_ratio", None)
            variants[k] = VariantResult(**v)
        return cls(variants=variants, **d)


@torch.no_grad()
def per_image_error(model: ReconModel, x: torch.Tensor, batch_size: int = 500) -> np.ndarray:
    model.eval()
    errs = []
    for i in range(0, len(x), batch_size):
        xb = x[i : i + batch_size]
        errs.append(((model(xb).y_hat - xb) ** 2).flatten(1).mean(1))
    return torch.cat(errs).double().numpy()


def probe_indices(labels) -> list[int]:
    """First test image of every digit class, in class order."""
    labels = np.asarray(labels)
    return [int(np.flatnonzero(labels == d)[0]) for d in range(10) if (labels == d).any()]


@torch.no_grad()
def save_grid(model: ReconModel, probes: torch.Tensor, path, scale: int = 3) -> None:
    """Two-row PNG: probe digits on top, reconstructions underneath."""
    model.eval()
    rec = model(probes).y_hat.clamp(0, 1)
    rows = [torch.cat(list(t[:, 0]), dim=1) for t in (probes, rec)]
    img = (torch.cat(rows, dim=0).numpy() * 255).round().astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="L").save(path)


# narrow widths keep three seeds of a/c/f within a few minutes on one core
TOY_DEFAULTS = dict(base_channels=(8, 16, 32, 64), num_slots=100, temperature=0.1)


def toy_config(variant: str, **overrides) -> ReconConfig:
    params = dict(variant=variant, in_channels=1, **TOY_DEFAULTS)
    params.update(overrides)
    return ReconConfig(**params)


def run_mnist_toy(
    variants=("a", "c", "f"),
    epochs: int = 10,
    subset_size: int = 2000,
    seed: int = 0,
    data: dict | None = None,
    out_dir=None,
    batch_size: int = 128,
    lr: float = 1e-3,
    **recon_overrides,
) -> ToyReport:
    """Train each variant on digit-2 training images, score the full test split.

    ``recon_overrides`` go to :class:`ReconConfig` on top of ``TOY_DEFAULTS``
    (e.g. ``base_channels``, ``num_slots``).  Grids are written only when ``out_dir`` is given.
    """
    variants = list(variants)
    unknown = [v for v in variants if v not in VARIANT_NAMES]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {sorted(VARIANT_NAMES)}")
    if data is None:
        data = load_mnist()
    normal = np.flatnonzero(data["y_train"] == NORMAL_DIGIT)
    if subset_size > len(normal):
        logger.warning("only %d digit-%d images available", len(normal), NORMAL_DIGIT)
    pick = np.random.default_rng(seed).permutation(normal)[:subset_size]
    x_train = pad_digits(data["x_train"][np.sort(pick)])
    x_test = pad_digits(data["x_test"])
    is_anomaly = (np.asarray(data["y_test"]) != NORMAL_DIGIT).astype(int)
    probes = x_test[probe_indices(data["y_test"])]

    report = ToyReport(
        seed=seed,
        epochs=epochs,
        subset_size=len(pick),
        config=json.loads(json.dumps(dict(batch_size=batch_size, lr=lr, **{**TOY_DEFAULTS, **recon_overrides}))),
    )
    for v in variants:
        seed_everything(seed)
        model = ReconModel(toy_config(v, **recon_overrides))
        fit_recon(model, x_train, OptimConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed), log_every=0)
        err = per_image_error(model, x_test)
        grid = None
        if out_dir is not None:
            grid = str(Path(out_dir) / f"grid_{v}_seed{seed}.png")
            save_grid(model, probes, grid)
        report.variants[v] = VariantResult(
            auroc=auroc(err, is_anomaly),
            mean_normal_error=float(err[is_anomaly == 0].mean()),
            mean_abnormal_error=float(err[is_anomaly == 1].mean()),
            grid=grid,
        )
        r = report.variants[v]
        logger.info("variant %s auroc %.4f ratio %.3f", v, r.auroc, r.error_ratio)
    if out_dir is not None:
        report.to_json(Path(out_dir) / f"toy_report_seed{seed}.json")
    return report
