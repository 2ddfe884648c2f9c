"""Bit-exact binary tensor container ("CCDT") and the dataset manifest.

File layout, all little-endian:

    bytes 0..3   magic b"CCDT"
    bytes 4..5   u16 version (currently 1)
    byte  6      u8 dtype tag (0 = float32 little-endian, the only tag in v1)
    byte  7      u8 rank (>= 1)
    next 4*rank  u32 dims, slowest-varying first
    rest         row-major float32 payload, 4 * prod(dims) bytes

The manifest is a JSON document binding images to their tensor files; all
dimension checks run eagerly at load time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    TensorFormatError,
    TruncatedTensorError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)

MAGIC = b"CCDT"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sHBB")


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Write ``tensor`` as a CCDT file. Byte-identical across runs."""
    if np.asarray(tensor).ndim == 0:
        raise TensorFormatError("rank-0 tensors are not representable; got a scalar")
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if any(d <= 0 for d in arr.shape):
        raise TensorFormatError(f"dims must be positive, got {arr.shape}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.tobytes(order="C")
    if len(payload) != 4 * int(np.prod(arr.shape)):
        raise TensorFormatError(
            f"payload length {len(payload)} does not match dims {arr.shape}"
        )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload)


def tensor_to_bytes(tensor: np.ndarray) -> bytes:
    """CCDT encoding of ``tensor`` as an in-memory byte string."""
    if np.asarray(tensor).ndim == 0:
        raise TensorFormatError("rank-0 tensors are not representable; got a scalar")
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    return (
        _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
        + struct.pack(f"<{arr.ndim}I", *arr.shape)
        + arr.tobytes(order="C")
    )


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a CCDT file back into a float32 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    arr, consumed = tensor_from_bytes(data, source=str(path))
    if consumed != len(data):
        raise TensorFormatError(
            f"{path}: {len(data) - consumed} trailing bytes after payload"
        )
    return arr


def tensor_from_bytes(data: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one CCDT record starting at ``offset``.

    Returns the array and the offset one past the payload, so records can be
    concatenated (the embedding cache relies on this).
    """
    if len(data) - offset < _HEADER.size:
        raise TruncatedTensorError(f"{source}: {len(data) - offset} bytes is too short for a header")
    magic, version, dtype, rank = _HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{source}: unsupported dtype tag {dtype}")
    if rank == 0:
        raise TensorFormatError(f"{source}: rank 0 is forbidden")
    pos = offset + _HEADER.size
    if len(data) - pos < 4 * rank:
        raise TruncatedTensorError(f"{source}: header truncated inside dims")
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{source}: zero dimension in {dims}")
    expected = 4 * int(np.prod(dims))
    actual = len(data) - pos
    if actual < expected:
        raise TruncatedTensorError(
            f"{source}: payload truncated, expected {expected} bytes, got {actual}"
        )
    arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(dims)), offset=pos)
    return arr.reshape(dims).copy(), pos + expected


@dataclass
class ImageRecord:
    image_id: str
    width_px: int
    height_px: int
    global_embedding_path: str
    feature_map_path: str
    weak_feature_path: str | None = None
    strong_feature_path: str | None = None
    gt_label_path: str | None = None
    gt_boxes: list[dict] = field(default_factory=list)


@dataclass
class DatasetManifest:
    class_names: list[str]
    embedding_dim: int
    feature_channels: int
    feature_grid: tuple[int, int]  # (h, w)
    text_embedding_path: str
    image_records: list[ImageRecord]
    root: Path  # directory the relative tensor paths resolve against

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, rel: str) -> Path:
        return self.root / rel


_REQUIRED_TOP = ["class_names", "embedding_dim", "feature_channels",
                 "feature_grid", "text_embedding_path", "image_records"]
_REQUIRED_RECORD = ["image_id", "width_px", "height_px",
                    "global_embedding_path", "feature_map_path"]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and fully validate a dataset manifest.

    Every referenced tensor file is opened and its dims checked against the
    declared embedding_dim / feature_channels / feature_grid, so a dataset
    that loads is a dataset the pipeline can run on.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})")

    for key in _REQUIRED_TOP:
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")

    class_names = doc["class_names"]
    if not class_names:
        raise ManifestError(f"{path}: class_names is empty")
    if len(set(class_names)) != len(class_names):
        dupes = sorted({c for c in class_names if class_names.count(c) > 1})
        raise ManifestError(f"{path}: duplicate class names {dupes}")
    n_classes = len(class_names)

    dim = int(doc["embedding_dim"])
    channels = int(doc["feature_channels"])
    grid = tuple(int(v) for v in doc["feature_grid"])
    if dim <= 0 or channels <= 0 or len(grid) != 2 or min(grid) < 1:
        raise ManifestError(f"{path}: bad embedding_dim/feature_channels/feature_grid")

    root = path.parent

    def check_tensor(rel: str, shape: tuple[int, ...], what: str, image_id: str | None = None) -> None:
        where = f"{what}" + (f" of image {image_id!r}" if image_id else "")
        full = root / rel
        if not full.exists():
            raise ManifestError(f"{path}: {where}: file not found: {full}")
        arr = read_tensor(full)
        if arr.shape != shape:
            raise ManifestError(
                f"{path}: {where}: dims {arr.shape} do not match declared {shape}"
            )

    check_tensor(doc["text_embedding_path"], (n_classes, dim), "text_embedding")

    if not doc["image_records"]:
        raise ManifestError(f"{path}: image_records is empty")
    records: list[ImageRecord] = []
    seen_ids: set[str] = set()
    for raw in doc["image_records"]:
        for key in _REQUIRED_RECORD:
            if key not in raw:
                raise ManifestError(f"{path}: image record missing field {key!r}: {raw}")
        rec = ImageRecord(
            image_id=str(raw["image_id"]),
            width_px=int(raw["width_px"]),
            height_px=int(raw["height_px"]),
            global_embedding_path=raw["global_embedding_path"],
            feature_map_path=raw["feature_map_path"],
            weak_feature_path=raw.get("weak_feature_path"),
            strong_feature_path=raw.get("strong_feature_path"),
            gt_label_path=raw.get("gt_label_path"),
            gt_boxes=raw.get("gt_boxes", []),
        )
        if rec.image_id in seen_ids:
            raise ManifestError(f"{path}: duplicate image_id {rec.image_id!r}")
        seen_ids.add(rec.image_id)
        if rec.width_px < 1 or rec.height_px < 1:
            raise ManifestError(f"{path}: image {rec.image_id!r} has non-positive pixel dims")

        check_tensor(rec.global_embedding_path, (dim,), "global_embedding", rec.image_id)
        fm_shape = (channels, grid[0], grid[1])
        check_tensor(rec.feature_map_path, fm_shape, "feature_map", rec.image_id)
        if rec.weak_feature_path is not None:
            check_tensor(rec.weak_feature_path, fm_shape, "weak_feature", rec.image_id)
        if rec.strong_feature_path is not None:
            check_tensor(rec.strong_feature_path, fm_shape, "strong_feature", rec.image_id)
        if rec.gt_label_path is not None:
            gt = read_tensor(root / rec.gt_label_path)
            if gt.shape != (n_classes,):
                raise ManifestError(
                    f"{path}: gt_label of image {rec.image_id!r}: dims {gt.shape} != ({n_classes},)"
                )
            if not np.all(np.isin(gt, (0.0, 1.0))):
                raise ManifestError(
                    f"{path}: gt_label of image {rec.image_id!r}: entries must be 0 or 1"
                )
        for entry in rec.gt_boxes:
            if "class" not in entry or "box" not in entry:
                raise ManifestError(f"{path}: gt_boxes entry needs 'class' and 'box': {entry}")
            c = int(entry["class"])
            x0, y0, x1, y1 = entry["box"]
            if not (0 <= c < n_classes):
                raise ManifestError(f"{path}: gt_boxes class {c} out of range for image {rec.image_id!r}")
            if not (0 <= x0 < x1 <= rec.width_px and 0 <= y0 < y1 <= rec.height_px):
                raise ManifestError(
                    f"{path}: gt_boxes box {entry['box']} invalid for image {rec.image_id!r}"
                )
        records.append(rec)

    return DatasetManifest(
        class_names=list(class_names),
        embedding_dim=dim,
        feature_channels=channels,
        feature_grid=(grid[0], grid[1]),
        text_embedding_path=doc["text_embedding_path"],
        image_records=records,
        root=root,
    )
