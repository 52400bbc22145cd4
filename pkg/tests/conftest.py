import os
import struct
from pathlib import Path

import numpy as np
import pytest


def mnist_dir() -> Path:
    return Path(os.environ.get("MASKCAM_MNIST_DIR", "/root/data/mnist"))


def has_mnist() -> bool:
    d = mnist_dir()
    return (d / "train-images-idx3-ubyte").exists() and (d / "train-labels-idx1-ubyte").exists()


needs_mnist = pytest.mark.skipif(
    not has_mnist(),
    reason="MNIST IDX files not found; set MASKCAM_MNIST_DIR",
)


def write_idx_images(path, images: np.ndarray) -> None:
    """Reference IDX writer used to build fixtures: big-endian, magic 0x803."""
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes(order="C"))


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.size))
        f.write(labels.tobytes())
