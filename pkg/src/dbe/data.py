"""Dataset ingestion: IDX image/label files, deterministic splits, and a
synthetic multilabel compositor that pastes digits onto a larger canvas.

IDX layout (big-endian): images carry magic 2051, then u32 count, u32 rows,
u32 cols and raw bytes; labels carry magic 2049, then u32 count and one byte
per sample. Gzipped files are detected by their two-byte signature.

The multilabel sidecar ("DBEL") stores one membership bit-vector per sample:
magic, u32 class count, u64 sample count (little-endian), then rows of
ceil(C/8) bytes with bit j at byte j//8, position j%8 (least significant
first).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, FormatError, UsageError

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
LABEL_MATRIX_MAGIC = b"DBEL"


@dataclass
class LabelSet:
    """Per-sample labels: a class index per sample (multiclass) or a
    C-length membership bit-vector per sample (multilabel)."""

    kind: str  # "multiclass" | "multilabel"
    num_classes: int
    indices: Optional[np.ndarray] = None  # (N,) int64
    matrix: Optional[np.ndarray] = None  # (N, C) uint8 in {0,1}

    def __post_init__(self):
        if self.kind == "multiclass":
            self.indices = np.asarray(self.indices, dtype=np.int64)
            if self.indices.ndim != 1:
                raise DataError("multiclass labels must be a 1-d index array")
            if len(self.indices) and (
                self.indices.min() < 0 or self.indices.max() >= self.num_classes
            ):
                raise DataError(
                    f"class indices outside [0, {self.num_classes})"
                )
        elif self.kind == "multilabel":
            self.matrix = np.asarray(self.matrix, dtype=np.uint8)
            if self.matrix.ndim != 2 or self.matrix.shape[1] != self.num_classes:
                raise DataError(
                    f"membership matrix must be (N, {self.num_classes}), "
                    f"got {self.matrix.shape}"
                )
        else:
            raise DataError(f"unknown label kind {self.kind!r}")

    def __len__(self):
        return len(self.indices) if self.kind == "multiclass" else len(self.matrix)

    @property
    def c_plus(self) -> np.ndarray:
        """Positive-label count per sample."""
        if self.kind == "multiclass":
            return np.ones(len(self), dtype=np.int64)
        return self.matrix.sum(axis=1).astype(np.int64)

    def subset(self, idx) -> "LabelSet":
        if self.kind == "multiclass":
            return LabelSet("multiclass", self.num_classes, indices=self.indices[idx])
        return LabelSet("multilabel", self.num_classes, matrix=self.matrix[idx])


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: LabelSet
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be 4-d, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.images)

    def subset(self, idx, split: str = "") -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels.subset(idx), split)


# ---------------------------------------------------------------------------
# IDX parsing


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, what, offset):
    chunk = f.read(n)
    if len(chunk) != n:
        raise FormatError(
            f"truncated reading {what}: wanted {n} bytes at offset {offset}, "
            f"got {len(chunk)}"
        )
    return chunk


def read_idx_images(path) -> np.ndarray:
    """Parse an IDX image file into a (N, rows, cols) uint8 array."""
    with _open_maybe_gzip(path) as f:
        header = _read_exact(f, 16, "image header", 0)
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"bad image magic {magic} at offset 0 (expected {IDX_IMAGE_MAGIC})"
            )
        payload = _read_exact(f, count * rows * cols, "pixels", 16)
        if f.read(1):
            raise FormatError(f"trailing bytes after offset {16 + len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open_maybe_gzip(path) as f:
        header = _read_exact(f, 8, "label header", 0)
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"bad label magic {magic} at offset 0 (expected {IDX_LABEL_MAGIC})"
            )
        payload = _read_exact(f, count, "labels", 8)
        if f.read(1):
            raise FormatError(f"trailing bytes after offset {8 + count}")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    """Write (N, rows, cols) uint8 pixels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_mnist(image_path, label_path, num_classes: int = 10,
               split: str = "") -> ImageDataset:
    """Load an IDX image/label pair, scale pixels to [0, 1], and cross-check
    the two counts."""
    pixels = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if len(pixels) != len(labels):
        raise FormatError(
            f"count mismatch: {len(pixels)} images vs {len(labels)} labels"
        )
    images = (pixels.astype(np.float32) / 255.0)[:, None, :, :]
    return ImageDataset(
        images,
        LabelSet("multiclass", num_classes, indices=labels.astype(np.int64)),
        split,
    )


# ---------------------------------------------------------------------------
# splits


def split_train_val(dataset: ImageDataset, val_size: int = 5000,
                    seed: int = 0) -> tuple[ImageDataset, ImageDataset]:
    """Seed-deterministic disjoint split, stratified so every class lands in
    both halves. Per-class validation counts follow the class proportions
    (largest remainder), so the sizes are exactly (N - val_size, val_size)."""
    n = len(dataset)
    if not 0 < val_size < n:
        raise UsageError(f"val_size must be in (0, {n}), got {val_size}")
    if dataset.labels.kind != "multiclass":
        raise UsageError("stratified split requires multiclass labels")
    y = dataset.labels.indices
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    quota = counts * (val_size / n)
    base = np.floor(quota).astype(int)
    remainder = val_size - base.sum()
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:remainder]] += 1
    if (base < 1).any() or (counts - base < 1).any():
        raise UsageError("val_size leaves some class empty in one split")

    val_idx = []
    for cls, take in zip(classes, base):
        members = np.flatnonzero(y == cls)
        val_idx.append(rng.permutation(members)[:take])
    val_idx = np.sort(np.concatenate(val_idx))
    mask = np.zeros(n, dtype=bool)
    mask[val_idx] = True
    train_idx = np.flatnonzero(~mask)
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


# ---------------------------------------------------------------------------
# synthetic multilabel compositor


def synth_multilabel(
    n_samples: int,
    digit_source: ImageDataset,
    seed: int = 0,
    canvas: int = 56,
    max_digits: int = 4,
) -> ImageDataset:
    """Composite 1..max_digits distinct digits per sample onto a canvas at
    non-overlapping quadrant positions; the label vector marks the digit
    classes present. Fully deterministic for a fixed seed."""
    if digit_source.labels.kind != "multiclass":
        raise UsageError("digit source must be a multiclass dataset")
    src_h, src_w = digit_source.images.shape[2:]
    if canvas < 2 * src_h or canvas < 2 * src_w:
        raise UsageError(
            f"canvas {canvas} cannot hold a 2x2 grid of {src_h}x{src_w} digits"
        )
    rng = np.random.default_rng(seed)
    y = digit_source.labels.indices
    num_classes = digit_source.labels.num_classes
    by_class = [np.flatnonzero(y == c) for c in range(num_classes)]
    for c, members in enumerate(by_class):
        if len(members) == 0:
            raise DataError(f"digit source has no samples of class {c}")

    qy = (0, 0, canvas - src_h, canvas - src_h)
    qx = (0, canvas - src_w, 0, canvas - src_w)
    images = np.zeros((n_samples, 1, canvas, canvas), dtype=np.float32)
    matrix = np.zeros((n_samples, num_classes), dtype=np.uint8)
    for i in range(n_samples):
        count = int(rng.integers(1, max_digits + 1))
        classes = rng.choice(num_classes, size=count, replace=False)
        quadrants = rng.choice(4, size=count, replace=False)
        for cls, q in zip(classes, quadrants):
            pick = int(rng.choice(by_class[cls]))
            tile = digit_source.images[pick, 0]
            images[i, 0, qy[q] : qy[q] + src_h, qx[q] : qx[q] + src_w] = tile
            matrix[i, cls] = 1
    return ImageDataset(
        images, LabelSet("multilabel", num_classes, matrix=matrix), "synthetic"
    )


# ---------------------------------------------------------------------------
# membership-matrix sidecar file


def write_label_matrix(path, labels: LabelSet) -> None:
    if labels.kind != "multilabel":
        raise UsageError("label matrix files store multilabel sets")
    n, c = labels.matrix.shape
    packed = np.packbits(labels.matrix, axis=1, bitorder="little")
    with open(path, "wb") as f:
        f.write(LABEL_MATRIX_MAGIC)
        f.write(struct.pack("<IQ", c, n))
        f.write(packed.tobytes())


def read_label_matrix(path) -> LabelSet:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != LABEL_MATRIX_MAGIC:
        raise FormatError("bad label matrix magic at offset 0")
    if len(raw) < 16:
        raise FormatError(f"truncated header: {len(raw)} bytes")
    c, n = struct.unpack("<IQ", raw[4:16])
    row_bytes = (c + 7) // 8
    expected = 16 + n * row_bytes
    if len(raw) != expected:
        raise FormatError(
            f"payload length {len(raw) - 16} != {n} rows of {row_bytes} bytes "
            f"(offset 16)"
        )
    packed = np.frombuffer(raw[16:], dtype=np.uint8).reshape(n, row_bytes)
    matrix = np.unpackbits(packed, axis=1, bitorder="little")[:, :c]
    return LabelSet("multilabel", c, matrix=matrix)
