"""Bit-exact float tensor container and 8-bit PNG emission.

Tensor file layout (little-endian except the ASCII magic):

    magic  "LTNS"            4 bytes
    version u32 = 1
    dtype   u8   (1 = float32, 2 = float64)
    ndim    u8   (0 allowed: scalar; capped at 32)
    extents ndim x u64
    payload row-major raw floats

Values must be finite; both save and load enforce it.  PNG output is 8-bit,
no alpha, quantized with the fixed rule byte = floor(255*x + 0.5) (round half
up) so 0.5 maps to 128 on every platform.
"""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

_MAGIC = b"LTNS"
_VERSION = 1
_MAX_NDIM = 32
_DTYPE_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_tensor(t, path) -> None:
    """Write a float32/float64 array to ``path`` in the raw container format."""
    arr = np.asarray(t)
    if arr.dtype not in _DTYPE_CODE:
        raise TypeError(f"only float32/float64 tensors are supported, got {arr.dtype}")
    if arr.ndim > _MAX_NDIM:
        raise ValueError(f"ndim {arr.ndim} exceeds the format cap of {_MAX_NDIM}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    head = _MAGIC + struct.pack("<IBB", _VERSION, _DTYPE_CODE[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(f"<f{arr.itemsize}", copy=False).tobytes(order="C")
    Path(path).write_bytes(head + payload)


def load_tensor(path) -> np.ndarray:
    """Read a tensor written by :func:`save_tensor`; validates every header field."""
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise ValueError("truncated header")
    if raw[:4] != _MAGIC:
        raise ValueError(f"bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    version, code, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported version {version}, expected {_VERSION}")
    if code not in _CODE_DTYPE:
        raise ValueError(f"unknown dtype code {code}")
    if ndim > _MAX_NDIM:
        raise ValueError(f"ndim {ndim} exceeds the format cap of {_MAX_NDIM}")
    offset = 10
    if len(raw) < offset + 8 * ndim:
        raise ValueError("truncated extents")
    shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    dtype = _CODE_DTYPE[code]
    count = 1
    for e in shape:
        count *= e
    need = count * dtype.itemsize
    body = raw[offset:]
    if len(body) < need:
        raise ValueError(f"truncated payload: need {need} bytes, have {len(body)}")
    if len(body) > need:
        raise ValueError(f"trailing bytes after payload: {len(body) - need}")
    arr = np.frombuffer(body, dtype=dtype).reshape(shape)
    arr = arr.astype(arr.dtype.newbyteorder("="))  # native order, owns memory
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _quantize(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        warnings.warn("pixel values outside [0,1] clamped for PNG output")
        arr = np.clip(arr, 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def write_png_grayscale(t, path) -> None:
    """Write an HxW tensor in [0,1] as an 8-bit grayscale PNG, top row first."""
    from PIL import Image

    arr = _quantize(t)
    if arr.ndim != 2:
        raise ValueError(f"grayscale PNG needs an HxW tensor, got shape {arr.shape}")
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")


def write_png_rgb(t, path) -> None:
    """Write a 3xHxW tensor in [0,1] as an 8-bit RGB PNG."""
    from PIL import Image

    arr = _quantize(t)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"RGB PNG needs a 3xHxW tensor, got shape {arr.shape}")
    Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB").save(Path(path), format="PNG")
