"""Byte-level contracts for the raw tensor container and PNG emission.

The expected-bytes fixtures below are packed by hand with struct, independent
of the implementation, so header layout is pinned and not self-referential.
"""

import struct
import warnings

import numpy as np
import pytest
from PIL import Image

from maskcam.rng import Rng
from maskcam.tensorio import load_tensor, save_tensor, write_png_grayscale, write_png_rgb


def _reference_encode(arr: np.ndarray) -> bytes:
    """Independent encoder: magic, u32 version, u8 dtype, u8 ndim, u64 extents, payload."""
    code = {np.float32: 1, np.float64: 2}[arr.dtype.type]
    head = b"LTNS" + struct.pack("<IBB", 1, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    le = arr.astype(f"<f{arr.itemsize}", copy=False)
    return head + le.tobytes(order="C")


def test_known_bytes_float32(tmp_path):
    arr = np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32)
    p = tmp_path / "t.ltns"
    save_tensor(arr, p)
    assert p.read_bytes() == _reference_encode(arr)


def test_known_bytes_float64_scalar(tmp_path):
    arr = np.array(3.5, dtype=np.float64)
    p = tmp_path / "s.ltns"
    save_tensor(arr, p)
    assert p.read_bytes() == b"LTNS" + struct.pack("<IBB", 1, 2, 0) + struct.pack("<d", 3.5)
    back = load_tensor(p)
    assert back.shape == () and back.dtype == np.float64 and back == 3.5


def test_roundtrip_identity_many_shapes(tmp_path):
    rng = Rng(123)
    p = tmp_path / "rt.ltns"
    for i in range(1000):
        ndim = int(rng.uniform((), 0, 5))
        shape = tuple(int(rng.uniform((), 1, 7)) for _ in range(ndim))
        vals = rng.uniform(shape, -1e6, 1e6)
        arr = vals.astype(np.float32 if i % 2 else np.float64)
        save_tensor(arr, p)
        back = load_tensor(p)
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()  # bit-exact


def test_reference_decode_matches_loader(tmp_path):
    arr = Rng(5).uniform((3, 4, 2)).astype(np.float32)
    p = tmp_path / "x.ltns"
    p.write_bytes(_reference_encode(arr))
    assert np.array_equal(load_tensor(p), arr)


def test_wrong_magic(tmp_path):
    p = tmp_path / "bad.ltns"
    p.write_bytes(b"XTNS" + struct.pack("<IBB", 1, 1, 0) + struct.pack("<f", 0.0))
    with pytest.raises(ValueError, match="magic"):
        load_tensor(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "bad.ltns"
    p.write_bytes(b"LTNS" + struct.pack("<IBB", 2, 1, 0) + struct.pack("<f", 0.0))
    with pytest.raises(ValueError, match="version"):
        load_tensor(p)


def test_unknown_dtype_code(tmp_path):
    p = tmp_path / "bad.ltns"
    p.write_bytes(b"LTNS" + struct.pack("<IBB", 1, 9, 0) + struct.pack("<f", 0.0))
    with pytest.raises(ValueError, match="dtype"):
        load_tensor(p)


def test_dim_overflow(tmp_path):
    p = tmp_path / "bad.ltns"
    p.write_bytes(b"LTNS" + struct.pack("<IBB", 1, 1, 64) + b"\x01" * 8 * 64)
    with pytest.raises(ValueError, match="ndim"):
        load_tensor(p)


def test_truncated_payload(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    p = tmp_path / "bad.ltns"
    p.write_bytes(_reference_encode(arr)[:-7])
    with pytest.raises(ValueError, match="truncated"):
        load_tensor(p)


def test_trailing_bytes_rejected(tmp_path):
    arr = np.ones(3, dtype=np.float32)
    p = tmp_path / "bad.ltns"
    p.write_bytes(_reference_encode(arr) + b"junk")
    with pytest.raises(ValueError, match="trailing"):
        load_tensor(p)


def test_save_rejects_nonfinite(tmp_path):
    with pytest.raises(ValueError, match="finite"):
        save_tensor(np.array([1.0, np.nan]), tmp_path / "nan.ltns")


def test_load_rejects_nonfinite(tmp_path):
    arr = np.array([np.inf, 1.0], dtype=np.float32)
    p = tmp_path / "inf.ltns"
    p.write_bytes(_reference_encode(arr))
    with pytest.raises(ValueError, match="finite"):
        load_tensor(p)


def test_save_rejects_integer_dtype(tmp_path):
    with pytest.raises(TypeError):
        save_tensor(np.arange(4), tmp_path / "int.ltns")


# ---------------------------------------------------------------- PNG output


def test_png_all_zero_black(tmp_path):
    p = tmp_path / "z.png"
    write_png_grayscale(np.zeros((5, 7)), p)
    img = np.asarray(Image.open(p))
    assert img.shape == (5, 7) and img.dtype == np.uint8
    assert np.all(img == 0)


def test_png_quantization_rule(tmp_path):
    # round half up: 1.0 -> 255, 0.5 -> 128, 0 -> 0
    p = tmp_path / "q.png"
    write_png_grayscale(np.array([[0.0, 0.5, 1.0]]), p)
    assert np.asarray(Image.open(p)).tolist() == [[0, 128, 255]]


def test_png_row_order_top_to_bottom(tmp_path):
    t = np.zeros((3, 2))
    t[0] = 1.0  # first tensor row must be the top image row
    p = tmp_path / "rows.png"
    write_png_grayscale(t, p)
    img = np.asarray(Image.open(p))
    assert np.all(img[0] == 255) and np.all(img[1:] == 0)


def test_png_out_of_range_clamps_with_warning(tmp_path):
    p = tmp_path / "c.png"
    with pytest.warns(UserWarning, match="clamp"):
        write_png_grayscale(np.array([[-0.5, 1.5]]), p)
    assert np.asarray(Image.open(p)).tolist() == [[0, 255]]


def test_png_rgb_channels(tmp_path):
    t = np.zeros((3, 2, 2))
    t[0, 0, 0] = 1.0  # red in top-left
    t[2, 1, 1] = 1.0  # blue in bottom-right
    p = tmp_path / "rgb.png"
    write_png_rgb(t, p)
    img = np.asarray(Image.open(p))
    assert img.shape == (2, 2, 3)
    assert img[0, 0].tolist() == [255, 0, 0]
    assert img[1, 1].tolist() == [0, 0, 255]


def test_png_no_alpha(tmp_path):
    p = tmp_path / "g.png"
    write_png_grayscale(np.full((4, 4), 0.25), p)
    assert Image.open(p).mode == "L"
    write_png_rgb(np.full((3, 4, 4), 0.25), tmp_path / "c.png")
    assert Image.open(tmp_path / "c.png").mode == "RGB"


def test_png_exact_roundtrip_of_quantized_values(tmp_path):
    rng = Rng(7)
    t = np.floor(rng.uniform((16, 16)) * 256) / 255.0
    t = np.clip(t, 0.0, 1.0)
    p = tmp_path / "rt.png"
    with warnings.catch_warnings():
        warnings.simplefilter("error")  # must not warn: values inside [0,1]
        write_png_grayscale(t, p)
    img = np.asarray(Image.open(p)).astype(np.float64)
    assert np.array_equal(img, np.floor(t * 255 + 0.5))
