"""Tensor files, dataset manifests and spatio-temporal cube extraction.

Tensor file layout (all little-endian)::

    "HF2T" | version:u8 (=1) | dtype:u8 (0=float32) | ndim:u8 | dims:u32*ndim | payload:f32

Manifests are JSON-lines, one record per video::

    {"video_id": ..., "frames": [...], "flows": [...], "boxes": [[[x0,y0,x1,y1], ...], ...],
     "labels": [0, 1, ...]}

Frame and flow paths are resolved relative to the manifest's directory.
Boxes use half-open pixel coordinates: columns ``x0 <= x < x1``, rows ``y0 <= y < y1``.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import CorruptionError, DatasetError, FormatError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"HF2T"
VERSION = 1
DTYPE_FLOAT32 = 0
MAX_NDIM = 8
_HEADER = struct.Struct("<4sBBB")


def encode_header(shape: Sequence[int]) -> bytes:
    shape = tuple(int(d) for d in shape)
    if len(shape) > MAX_NDIM:
        raise ShapeError(f"ndim {len(shape)} exceeds {MAX_NDIM}")
    if any(d < 0 or d > 0xFFFFFFFF for d in shape):
        raise ShapeError(f"dims {shape} do not fit in u32")
    return _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, len(shape)) + struct.pack(
        f"<{len(shape)}I", *shape
    )


def tensor_to_bytes(tensor) -> bytes:
    arr = _as_float32_array(tensor)
    return encode_header(arr.shape) + arr.astype("<f4", copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise CorruptionError("file shorter than tensor header")
    magic, version, dtype_code, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype_code != DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype_code}")
    if ndim > MAX_NDIM:
        raise FormatError(f"ndim {ndim} exceeds {MAX_NDIM}")
    offset = _HEADER.size
    if len(buf) < offset + 4 * ndim:
        raise CorruptionError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    payload = len(buf) - offset
    if payload != expected:
        raise CorruptionError(f"payload has {payload} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype="<f4", count=expected // 4, offset=offset)
    return arr.reshape(dims).astype(np.float32, copy=True)


def write_tensor(tensor, path) -> None:
    """Write a float32 array or tensor to ``path`` in the HF2T layout."""
    data = tensor_to_bytes(tensor)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor(path) -> np.ndarray:
    """Read an HF2T file back into a float32 ``np.ndarray``."""
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def _as_float32_array(tensor) -> np.ndarray:
    if isinstance(tensor, torch.Tensor):
        if tensor.dtype != torch.float32:
            raise FormatError(f"only float32 tensors are supported, got {tensor.dtype}")
        return np.asarray(tensor.detach().cpu().numpy(), order="C")
    arr = np.asarray(tensor)
    if arr.dtype != np.float32:
        raise FormatError(f"only float32 arrays are supported, got {arr.dtype}")
    return np.asarray(arr, order="C")


# --------------------------------------------------------------------------- manifests


@dataclass
class VideoRecord:
    video_id: str
    frames: list[str]
    flows: list[str]
    boxes: list[list[list[int]]]
    labels: list[int] | None = None

    def to_json(self) -> dict:
        rec = {
            "video_id": self.video_id,
            "frames": list(self.frames),
            "flows": list(self.flows),
            "boxes": [[list(map(int, b)) for b in frame_boxes] for frame_boxes in self.boxes],
        }
        if self.labels is not None:
            rec["labels"] = [int(v) for v in self.labels]
        return rec


@dataclass
class DatasetManifest:
    split: str
    videos: list[VideoRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        for video in self.videos:
            _validate_record(video, self.split)

    def __getitem__(self, video_id: str) -> VideoRecord:
        for video in self.videos:
            if video.video_id == video_id:
                return video
        raise DatasetError(f"unknown video {video_id!r}")

    @property
    def video_ids(self) -> list[str]:
        return [v.video_id for v in self.videos]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def _validate_record(video: VideoRecord, split: str) -> None:
    n = len(video.frames)
    if len(video.flows) != n - 1:
        raise DatasetError(
            f"{video.video_id}: {len(video.flows)} flows for {n} frames (need {n - 1})"
        )
    if len(video.boxes) != n:
        raise DatasetError(f"{video.video_id}: {len(video.boxes)} box lists for {n} frames")
    if split == "test":
        if video.labels is None or len(video.labels) != n:
            raise DatasetError(f"{video.video_id}: test split needs one label per frame")
        if any(v not in (0, 1) for v in video.labels):
            raise DatasetError(f"{video.video_id}: labels must be 0/1")
    elif video.labels is not None:
        raise DatasetError(f"{video.video_id}: labels are only allowed in the test split")


def load_manifest(path, split: str | None = None) -> DatasetManifest:
    """Load a JSON-lines manifest; ``split`` defaults to the file stem."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest {path} does not exist")
    split = split or path.stem
    videos = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                videos.append(
                    VideoRecord(
                        video_id=str(rec["video_id"]),
                        frames=list(rec["frames"]),
                        flows=list(rec["flows"]),
                        boxes=[[list(b) for b in fb] for fb in rec["boxes"]],
                        labels=rec.get("labels"),
                    )
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return DatasetManifest(split=split, videos=videos, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for video in manifest.videos:
            fh.write(json.dumps(video.to_json(), separators=(",", ":")) + "\n")


# --------------------------------------------------------------------------- STCs


@dataclass
class STCPair:
    """One object's frame cube ``(t+1, C, s, s)`` and flow cube ``(t, 2, s, s)``."""

    frames: np.ndarray
    flows: np.ndarray
    video_id: str
    target_frame_index: int
    box: tuple[int, int, int, int]


def load_frame(path) -> np.ndarray:
    """Load an 8-bit image as a ``(C, H, W)`` float32 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise DatasetError(f"missing frame file {path}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def load_flow(path) -> np.ndarray:
    try:
        flow = read_tensor(path)
    except FileNotFoundError as exc:
        raise DatasetError(f"missing flow file {path}") from exc
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DatasetError(f"flow {path} has shape {flow.shape}, expected (2, H, W)")
    return flow


def clamp_box(box, width: int, height: int) -> tuple[int, int, int, int] | None:
    """Clamp a box to the frame; ``None`` if nothing of it remains."""
    x0, y0, x1, y1 = (int(v) for v in box)
    x0, x1 = max(0, min(x0, width)), max(0, min(x1, width))
    y0, y1 = max(0, min(y0, height)), max(0, min(y1, height))
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, x1, y1


def crop_resize(stack: np.ndarray, box, size: int) -> np.ndarray:
    """Crop ``box`` out of a ``(T, C, H, W)`` stack and resize to ``size`` bilinearly."""
    x0, y0, x1, y1 = box
    crop = torch.from_numpy(np.ascontiguousarray(stack[:, :, y0:y1, x0:x1]))
    if crop.shape[-2:] == (size, size):
        return crop.numpy().copy()
    out = F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False)
    return out.numpy()


def extract_stcs(
    manifest: DatasetManifest, video_id: str, t: int = 4, size: int = 32
) -> Iterator[STCPair]:
    """Yield the STCs of one video, ordered by target frame then box order.

    The box at target frame ``i`` is cropped from frames ``i-t..i`` and from
    flows ``i-t..i-1``.  Flow vectors keep their pixel units after resizing.
    """
    if t < 1:
        raise ShapeError(f"t must be >= 1, got {t}")
    if size < 8:
        raise ShapeError(f"size must be >= 8, got {size}")
    video = manifest[video_id]
    n = len(video.frames)
    frames = None
    flows = None
    for i in range(t, n):
        if not video.boxes[i]:
            continue
        if frames is None:
            frames = np.stack([load_frame(manifest.resolve(p)) for p in video.frames])
            flows = np.stack([load_flow(manifest.resolve(p)) for p in video.flows])
            if flows.shape[-2:] != frames.shape[-2:]:
                raise DatasetError(f"{video_id}: flow and frame resolutions differ")
        height, width = frames.shape[-2:]
        for raw in video.boxes[i]:
            box = clamp_box(raw, width, height)
            if box is None:
                warnings.warn(f"{video_id} frame {i}: empty box {raw} skipped", stacklevel=2)
                continue
            yield STCPair(
                frames=crop_resize(frames[i - t : i + 1], box, size),
                flows=crop_resize(flows[i - t : i], box, size),
                video_id=video_id,
                target_frame_index=i,
                box=box,
            )


@dataclass
class STCBatch:
    """Stacked STCs of one or more videos, the array form used by the models."""

    frames: np.ndarray  # (n, t+1, C, s, s)
    flows: np.ndarray  # (n, t, 2, s, s)
    video_ids: list[str]
    target_index: np.ndarray  # (n,)
    boxes: np.ndarray  # (n, 4)

    def __len__(self) -> int:
        return len(self.video_ids)

    def subset(self, idx) -> "STCBatch":
        idx = np.asarray(idx)
        return STCBatch(
            frames=self.frames[idx],
            flows=self.flows[idx],
            video_ids=[self.video_ids[i] for i in idx],
            target_index=self.target_index[idx],
            boxes=self.boxes[idx],
        )


def collect_stcs(
    manifest: DatasetManifest, t: int = 4, size: int = 32, video_ids=None
) -> STCBatch:
    """Extract and stack STCs for every (or the listed) video of a manifest."""
    pairs: list[STCPair] = []
    for vid in video_ids or manifest.video_ids:
        pairs.extend(extract_stcs(manifest, vid, t=t, size=size))
    if not pairs:
        raise DatasetError("manifest produced no STCs")
    return STCBatch(
        frames=np.stack([p.frames for p in pairs]).astype(np.float32),
        flows=np.stack([p.flows for p in pairs]).astype(np.float32),
        video_ids=[p.video_id for p in pairs],
        target_index=np.array([p.target_frame_index for p in pairs], dtype=np.int64),
        boxes=np.array([p.box for p in pairs], dtype=np.int64),
    )


def data_root(default=None) -> Path:
    """Dataset root from ``HF2VAD_DATA_DIR`` (or ``default``, or ``./data``)."""
    return Path(os.environ.get("HF2VAD_DATA_DIR") or default or "data")
