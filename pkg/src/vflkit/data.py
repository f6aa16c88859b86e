"""Dataset tooling: MNIST-style IDX ingestion, ID assignment, vertical
splitting, row alignment, and partition/label file I/O.

Partition files ("PYVT") and label files ("PYVL") use little-endian integers
and little-endian float64 feature values; the partition file ends with a
CRC32 of everything before it.
"""

from __future__ import annotations

import gzip
import struct
import uuid
import zlib
from dataclasses import dataclass
from pathlib import Path
from random import Random

import numpy as np

from .errors import FormatError, LinkageError, ShapeError

__all__ = [
    "FeaturePartition",
    "LabeledSet",
    "load_mnist_idx",
    "assign_ids",
    "vertical_split",
    "scramble",
    "align_to",
    "write_partition",
    "read_partition",
    "write_labels",
    "read_labels",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PARTITION_MAGIC = b"PYVT"
PARTITION_VERSION = 1
LABELS_MAGIC = b"PYVL"


@dataclass
class FeaturePartition:
    """A vertical slice of the dataset held by one owner: (id, feature row) pairs."""

    ids: list[uuid.UUID]
    features: np.ndarray  # (n, width) float64
    owner_label: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if len(self.ids) != self.features.shape[0]:
            raise ShapeError(
                f"{len(self.ids)} ids for {self.features.shape[0]} feature rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("partition ids must be unique")
        if self.features.size and not np.isfinite(self.features).all():
            raise ValueError("features contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def id_bytes(self) -> list[bytes]:
        """16-byte forms, e.g. for PSI input."""
        return [i.bytes for i in self.ids]


@dataclass
class LabeledSet:
    """The scientist's (id, class label) pairs."""

    ids: list[uuid.UUID]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.ids) != self.labels.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 10):
            raise ValueError("labels must lie in [0, 10)")

    def __len__(self) -> int:
        return len(self.ids)

    def aligned_to(self, ordered_ids: list[uuid.UUID]) -> "LabeledSet":
        """Reorder to ``ordered_ids``, discarding everything else."""
        index = {u: i for i, u in enumerate(self.ids)}
        try:
            rows = [index[u] for u in ordered_ids]
        except KeyError as exc:
            raise LinkageError(f"id {exc.args[0]} not present in label set") from None
        return LabeledSet(ids=list(ordered_ids), labels=self.labels[rows])


def _read_maybe_gzip(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_mnist_idx(images_path: str | Path, labels_path: str | Path):
    """Load an IDX image/label file pair; pixels scaled to [0, 1].

    Returns (images: n x pixels float64 matrix, labels: int array). Gzipped
    files are handled transparently.
    """
    img_raw = _read_maybe_gzip(images_path)
    if len(img_raw) < 16:
        raise FormatError(f"{images_path}: truncated IDX header")
    magic, n_img, rows, cols = struct.unpack_from(">IIII", img_raw)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad IDX magic 0x{magic:08x}")
    if len(img_raw) != 16 + n_img * rows * cols:
        raise FormatError(f"{images_path}: truncated or oversized image data")

    lbl_raw = _read_maybe_gzip(labels_path)
    if len(lbl_raw) < 8:
        raise FormatError(f"{labels_path}: truncated IDX header")
    magic, n_lbl = struct.unpack_from(">II", lbl_raw)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad IDX magic 0x{magic:08x}")
    if len(lbl_raw) != 8 + n_lbl:
        raise FormatError(f"{labels_path}: truncated or oversized label data")
    if n_img != n_lbl:
        raise FormatError(f"image count {n_img} != label count {n_lbl}")

    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    images = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    return images, labels


def assign_ids(n: int, seed: int) -> list[uuid.UUID]:
    """n distinct UUIDs, deterministic from the seed; position i maps to sample i."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = Random(seed)
    ids: list[uuid.UUID] = []
    seen: set[bytes] = set()
    while len(ids) < n:
        raw = rng.randbytes(16)
        if raw in seen:  # 128-bit collision; effectively unreachable
            continue
        seen.add(raw)
        ids.append(uuid.UUID(bytes=raw))
    return ids


def vertical_split(
    images: np.ndarray, ids: list[uuid.UUID], cut_col: int = 14
) -> tuple[FeaturePartition, FeaturePartition]:
    """Split 28x28 images into left/right pixel-column blocks, flattened.

    Both partitions carry the same ids, so a row in one matches the row of the
    same index in the other.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != 28 * 28:
        raise ShapeError("images must be n x 784 (28x28 flattened)")
    if not (0 < cut_col < 28):
        raise ValueError("cut column must lie strictly inside the image")
    square = images.reshape(-1, 28, 28)
    left = square[:, :, :cut_col].reshape(len(images), -1)
    right = square[:, :, cut_col:].reshape(len(images), -1)
    return (
        FeaturePartition(ids=list(ids), features=left, owner_label="left"),
        FeaturePartition(ids=list(ids), features=right, owner_label="right"),
    )


def scramble(partition: FeaturePartition, keep_fraction: float, seed: int) -> FeaturePartition:
    """Keep a seeded random subset of rows in shuffled order, ids attached.

    Simulates independently collected datasets so that linkage has real work
    to do. Keeps exactly round(n * keep_fraction) rows.
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must lie in (0, 1]")
    n = len(partition)
    keep = round(n * keep_fraction)
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(n)[:keep]
    return FeaturePartition(
        ids=[partition.ids[i] for i in chosen],
        features=partition.features[chosen],
        owner_label=partition.owner_label,
    )


def align_to(partition: FeaturePartition, ordered_ids: list[uuid.UUID]) -> FeaturePartition:
    """Reorder rows to exactly ``ordered_ids``; all other rows are discarded."""
    index = {u: i for i, u in enumerate(partition.ids)}
    try:
        rows = [index[u] for u in ordered_ids]
    except KeyError as exc:
        raise LinkageError(
            f"id {exc.args[0]} requested but not held by {partition.owner_label!r}"
        ) from None
    return FeaturePartition(
        ids=list(ordered_ids),
        features=partition.features[rows] if rows else partition.features[:0],
        owner_label=partition.owner_label,
    )


# ---------------------------------------------------------------------------
# Partition and label files
# ---------------------------------------------------------------------------


def write_partition(partition: FeaturePartition, path: str | Path) -> None:
    label = partition.owner_label.encode("utf-8")
    if len(label) > 0xFFFF:
        raise ValueError("owner label too long")
    n, w = partition.features.shape
    head = PARTITION_MAGIC + struct.pack("<HH", PARTITION_VERSION, len(label)) + label
    head += struct.pack("<QI", n, w)
    body = bytearray(head)
    feats = np.ascontiguousarray(partition.features, dtype="<f8")
    for i in range(n):
        body += partition.ids[i].bytes
        body += feats[i].tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def read_partition(path: str | Path) -> FeaturePartition:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != PARTITION_MAGIC:
        raise FormatError(f"{path}: not a partition file")
    version, label_len = struct.unpack_from("<HH", raw, 4)
    if version != PARTITION_VERSION:
        raise FormatError(f"{path}: unsupported partition version {version}")
    offset = 8
    label = raw[offset : offset + label_len].decode("utf-8")
    offset += label_len
    if offset + 12 > len(raw):
        raise FormatError(f"{path}: truncated partition header")
    n, w = struct.unpack_from("<QI", raw, offset)
    offset += 12
    record = 16 + 8 * w
    expected = offset + n * record + 4
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} != expected {expected}")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise FormatError(f"{path}: checksum mismatch")
    ids = []
    features = np.empty((n, w), dtype=np.float64)
    for i in range(n):
        base = offset + i * record
        ids.append(uuid.UUID(bytes=raw[base : base + 16]))
        features[i] = np.frombuffer(raw, dtype="<f8", count=w, offset=base + 16)
    return FeaturePartition(ids=ids, features=features, owner_label=label)


def write_labels(labeled: LabeledSet, path: str | Path) -> None:
    body = bytearray(LABELS_MAGIC + struct.pack("<Q", len(labeled)))
    for u, y in zip(labeled.ids, labeled.labels):
        body += u.bytes + struct.pack("B", int(y))
    Path(path).write_bytes(bytes(body))


def read_labels(path: str | Path) -> LabeledSet:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != LABELS_MAGIC:
        raise FormatError(f"{path}: not a label file")
    (n,) = struct.unpack_from("<Q", raw, 4)
    if len(raw) != 12 + n * 17:
        raise FormatError(f"{path}: size {len(raw)} != expected {12 + n * 17}")
    ids = []
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        base = 12 + i * 17
        ids.append(uuid.UUID(bytes=raw[base : base + 16]))
        labels[i] = raw[base + 16]
    return LabeledSet(ids=ids, labels=labels)
