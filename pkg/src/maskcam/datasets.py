"""Labeled image datasets and the big-endian IDX ingestion path."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Images NxCxHxW in [0,1], integer class labels, and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"image/label count mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return self.images.shape[0]


def take(ds: LabeledDataset, n: int) -> LabeledDataset:
    """First-n subset; deterministic so desk-scale runs are reproducible."""
    return LabeledDataset(images=ds.images[:n], labels=ds.labels[:n], split=ds.split)


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise ValueError(f"truncated {what}: wanted {n} bytes, got {len(raw)}")
    return raw


def load_mnist_idx(images_path, labels_path, split: str = "train") -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian, magics 0x803/0x801)."""
    with open(Path(images_path), "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != _IMAGE_MAGIC:
            raise ValueError(f"bad image magic 0x{magic:08x}, expected 0x{_IMAGE_MAGIC:08x}")
        raw = _read_exact(f, n * h * w, "image payload")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    images = images.astype(np.float32) / 255.0

    with open(Path(labels_path), "rb") as f:
        magic, m = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != _LABEL_MAGIC:
            raise ValueError(f"bad label magic 0x{magic:08x}, expected 0x{_LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, m, "label payload"), dtype=np.uint8)

    if m != n:
        raise ValueError(f"image/label count mismatch: {n} images vs {m} labels")
    return LabeledDataset(images=images, labels=labels.astype(np.int64), split=split)
