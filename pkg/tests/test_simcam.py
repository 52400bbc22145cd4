"""Measurement-pipeline checks: scene prep geometry, linear FFT convolution
against a brute-force spatial oracle, bilinear downsampling, and shot noise."""

import numpy as np
import pytest

from maskcam.optics import IntensityPsf, grid_pitch
from maskcam.rng import Rng
from maskcam.simcam import (
    SceneConfig,
    collapse_grayscale,
    downsample,
    fft_convolve,
    prep_scene,
    shot_noise,
    simulate_example,
)

DESK = (96, 128)
PITCH = grid_pitch(DESK)


def _psf_like(shape=DESK, channels=3, seed=0):
    vals = Rng(seed).uniform((channels,) + shape)
    return IntensityPsf(values=vals, wavelengths=(640e-9, 550e-9, 460e-9)[:channels],
                        d1=0.4, d2=4e-3, pitch=grid_pitch(shape))


def _cfg(**kw):
    base = dict(h_obj=0.12, d1=0.4, d2=4e-3, downsample=4, target_snr_db=40.0)
    base.update(kw)
    return SceneConfig(**base)


# ------------------------------------------------------------------ prep


def test_magnification_height_example():
    cfg = _cfg()
    assert cfg.magnification == pytest.approx(-0.01, rel=1e-12)
    assert cfg.h_obj * abs(cfg.magnification) == pytest.approx(1.2e-3, rel=1e-12)


def test_prep_active_block_is_56x56_centered():
    # h_obj chosen so the object spans exactly 56 sensor-grid pixels
    h_obj = 56 * PITCH[0] / 0.01
    cfg = _cfg(h_obj=h_obj)
    out = prep_scene(np.ones((28, 28)), cfg, _psf_like())
    assert out.shape == (3, 96, 128)
    inside = out[:, 20:76, 36:92]
    assert inside.min() > 0.5
    border = out.copy()
    border[:, 20:76, 36:92] = 0
    assert np.all(border == 0)


def test_prep_identity_when_scale_is_one():
    h_obj = 28 * PITCH[0] / 0.01
    cfg = _cfg(h_obj=h_obj)
    img = Rng(3).uniform((28, 28))
    out = prep_scene(img, cfg, _psf_like())
    block = out[0, 34:62, 50:78]
    assert np.allclose(block, img, atol=1e-12)  # S=1: pad only, no resampling


def test_prep_odd_remainder_pads_extra_bottom_right():
    h_obj = 55 * PITCH[0] / 0.01  # 96-55 = 41 -> top 20, bottom 21
    cfg = _cfg(h_obj=h_obj)
    out = prep_scene(np.ones((55, 55)), cfg, _psf_like(channels=1))
    rows = np.flatnonzero(out[0].sum(axis=1))
    cols = np.flatnonzero(out[0].sum(axis=0))
    assert rows[0] == 20 and rows[-1] == 20 + 55 - 1
    assert cols[0] == (128 - 55) // 2 and len(cols) == 55


def test_prep_grayscale_broadcasts_channels():
    cfg = _cfg(h_obj=28 * PITCH[0] / 0.01)
    img = Rng(5).uniform((28, 28))
    out = prep_scene(img, cfg, _psf_like(channels=3))
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_prep_shift_equivariance():
    h_obj = 28 * PITCH[0] / 0.01
    dy_px, dx_px = 5, -7
    shift = (dy_px * PITCH[0] / 0.01, dx_px * PITCH[1] / 0.01)
    cfg0 = _cfg(h_obj=h_obj)
    cfg1 = _cfg(h_obj=h_obj, shift=shift)
    img = Rng(6).uniform((28, 28))
    base = prep_scene(img, cfg0, _psf_like(channels=1))
    moved = prep_scene(img, cfg1, _psf_like(channels=1))
    ref = np.zeros_like(base)
    ref[:, dy_px:, : 128 + dx_px] = base[:, :-dy_px, -dx_px:]
    assert np.max(np.abs(moved - ref)) < 1e-6


def test_prep_shift_outside_frame_errors():
    cfg = _cfg(h_obj=28 * PITCH[0] / 0.01, shift=(0.5, 0.0))  # 0.5 m in object plane
    with pytest.raises(ValueError, match="shift"):
        prep_scene(np.ones((28, 28)), cfg, _psf_like(channels=1))


def test_prep_object_too_large_errors():
    cfg = _cfg(h_obj=2.0)  # 20 mm at the sensor > 4.7 mm plane
    with pytest.raises(ValueError, match="fit"):
        prep_scene(np.ones((28, 28)), cfg, _psf_like(channels=1))


# ------------------------------------------------------------- convolution


def _conv_direct(scene, psf):
    """O(N^4) spatial linear convolution with the same center-crop window."""
    c, h, w = scene.shape
    out = np.zeros_like(scene)
    sy, sx = h // 2, w // 2
    for ch in range(c):
        full = np.zeros((2 * h - 1, 2 * w - 1))
        for i in range(h):
            for j in range(w):
                full[i : i + h, j : j + w] += scene[ch, i, j] * psf[ch]
        out[ch] = full[sy : sy + h, sx : sx + w]
    return out


def test_convolve_centered_delta_is_identity():
    scene = Rng(7).uniform((2, 16, 20))
    psf = np.zeros((2, 16, 20))
    psf[:, 8, 10] = 1.0
    out = fft_convolve(scene, psf)
    assert np.max(np.abs(out - scene)) <= 1e-10 * scene.max()


def test_convolve_matches_direct_spatial_oracle():
    scene = Rng(8).uniform((2, 16, 16))
    psf = Rng(9).uniform((2, 16, 16))
    out = fft_convolve(scene, psf)
    ref = _conv_direct(scene, psf)
    assert np.max(np.abs(out - ref)) <= 1e-10 * ref.max()


def test_convolve_linearity():
    x1 = Rng(10).uniform((1, 12, 14))
    x2 = Rng(11).uniform((1, 12, 14))
    psf = Rng(12).uniform((1, 12, 14))
    lhs = fft_convolve(2.0 * x1 + 3.0 * x2, psf)
    rhs = 2.0 * fft_convolve(x1, psf) + 3.0 * fft_convolve(x2, psf)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * rhs.max()


def test_convolve_nonnegative_output():
    scene = Rng(13).uniform((3,) + DESK)
    psf = _psf_like().values
    assert fft_convolve(scene, psf).min() >= 0.0


def test_convolve_dim_mismatch():
    with pytest.raises(ValueError, match="dims"):
        fft_convolve(np.ones((1, 8, 8)), np.ones((1, 8, 9)))


# ------------------------------------------------------------- downsampling


def test_downsample_identity():
    img = Rng(14).uniform((3, 10, 12))
    assert np.array_equal(downsample(img, 1), img)


def test_downsample_preserves_constants():
    img = np.full((2, 32, 48), 0.37)
    for d in (2, 3, 4, 8):
        out = downsample(img, d)
        assert out.shape == (2, 32 // d, 48 // d)
        assert np.max(np.abs(out - 0.37)) < 1e-12


def test_downsample_checkerboard_average():
    img = np.indices((16, 16)).sum(axis=0) % 2  # 2x2-period {0,1} checkerboard
    out = downsample(img.astype(float)[None], 2)
    assert np.max(np.abs(out - 0.5)) < 1e-12


def test_downsample_zero_dim_errors():
    with pytest.raises(ValueError):
        downsample(np.ones((1, 4, 4)), 8)


def test_downsample_strictly_fewer_elements():
    img = Rng(15).uniform((1, 96, 128))
    sizes = [downsample(img, d).size for d in (1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))


# --------------------------------------------------------------- shot noise


def _natural_image(seed=0, shape=(64, 64)):
    ys, xs = np.indices(shape) / shape[0]
    img = 0.4 + 0.3 * np.sin(2 * np.pi * ys) * np.cos(4 * np.pi * xs)
    img += 0.1 * Rng(seed).uniform(shape)
    return img


@pytest.mark.parametrize("target", [20.0, 40.0])
def test_shot_noise_snr_calibration(target):
    img = _natural_image()
    sig_var = img.var()
    snrs = []
    for seed in range(100):
        out = shot_noise(img, target, Rng(seed, stream=5))
        noise = out - img
        snrs.append(10 * np.log10(sig_var / noise.var()))
    assert abs(np.mean(snrs) - target) <= 1.0


def test_shot_noise_deterministic():
    img = _natural_image(1)
    a = shot_noise(img, 30.0, Rng(42))
    b = shot_noise(img, 30.0, Rng(42))
    assert np.array_equal(a, b)


def test_shot_noise_high_snr_limit():
    img = _natural_image(2)
    out = shot_noise(img, 300.0, Rng(0))
    assert np.max(np.abs(out - img)) < 1e-10


def test_shot_noise_nonnegative_output():
    img = _natural_image(3) * 0.05  # low signal so clamping actually engages
    out = shot_noise(img, 3.0, Rng(7))
    assert out.min() >= 0.0


def test_shot_noise_zero_variance_rejected():
    with pytest.raises(ValueError, match="variance"):
        shot_noise(np.full((8, 8), 0.5), 40.0, Rng(0))
    with pytest.raises(ValueError, match="variance"):
        shot_noise(np.zeros((8, 8)), 40.0, Rng(0))


def test_shot_noise_negative_input_rejected():
    with pytest.raises(ValueError):
        shot_noise(np.array([[-0.1, 0.5]]), 40.0, Rng(0))


# ------------------------------------------------------------ full pipeline


def test_simulate_example_dims_and_sign():
    cfg = _cfg(downsample=4)
    img = Rng(20).uniform((28, 28))
    emb = simulate_example(img, cfg, _psf_like(), Rng(0))
    assert emb.values.shape == (1, 24, 32)  # grayscale collapse by default
    assert emb.values.min() >= 0.0
    assert emb.psf_hash == _psf_like().geometry_hash or isinstance(emb.psf_hash, str)


def test_simulate_example_rgb_mode():
    cfg = _cfg(downsample=8)
    emb = simulate_example(Rng(21).uniform((28, 28)), cfg, _psf_like(), Rng(0), grayscale=False)
    assert emb.values.shape == (3, 12, 16)


def test_simulate_example_zero_image_errors():
    with pytest.raises(ValueError, match="variance"):
        simulate_example(np.zeros((28, 28)), _cfg(), _psf_like(), Rng(0))


def test_simulate_example_deterministic():
    img = Rng(22).uniform((28, 28))
    a = simulate_example(img, _cfg(), _psf_like(), Rng(3, stream=1))
    b = simulate_example(img, _cfg(), _psf_like(), Rng(3, stream=1))
    assert np.array_equal(a.values, b.values)


def test_collapse_grayscale_mean():
    psf = _psf_like()
    gray = collapse_grayscale(psf)
    assert gray.values.shape == (1,) + DESK
    assert np.allclose(gray.values[0], psf.values.mean(axis=0), atol=1e-15)


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(h_obj=0.12, d1=0.4, d2=4e-3, downsample=0, target_snr_db=40.0)
    with pytest.raises(ValueError):
        SceneConfig(h_obj=-0.12, d1=0.4, d2=4e-3, downsample=1, target_snr_db=40.0)


def test_prep_scene_batch_matches_single():
    from maskcam.simcam import prep_scene_batch

    psf = _psf_like((64, 64))
    cfg = _cfg(downsample=2, shift=(2e-2, -1e-2))
    images = Rng(31).uniform((5, 28, 28))
    batch = prep_scene_batch(images, cfg, psf)
    singles = np.stack([prep_scene(img, cfg, psf)[0] for img in images])
    assert batch.shape == singles.shape
    assert np.array_equal(batch, singles)


def test_prep_scene_batch_rejects_wrong_rank():
    from maskcam.simcam import prep_scene_batch

    psf = _psf_like((64, 64))
    cfg = _cfg(downsample=2)
    with pytest.raises(ValueError, match="N, H, W"):
        prep_scene_batch(np.zeros((28, 28)), cfg, psf)


# ------------------------------------------------------------------ golden


def test_golden_pipeline_tensor():
    """Digit 0 through prep -> convolve -> downsample -> shot noise
    reproduces the committed sensor embedding."""
    from pathlib import Path

    from maskcam.datasets import load_mnist_idx
    from maskcam.optics import DESK_GRID, SENSOR_EXTENT, simulate_psf, st7735r_geometry
    from maskcam.tensorio import load_tensor

    from conftest import has_mnist, mnist_dir

    if not has_mnist():
        pytest.skip("MNIST IDX files not available")
    root = mnist_dir()
    tr = load_mnist_idx(root / "train-images-idx3-ubyte",
                        root / "train-labels-idx1-ubyte", "train")
    geom = st7735r_geometry()
    psf = simulate_psf(geom, Rng(0).uniform((geom.num_subpixels,)),
                       0.4, 0.004, grid=DESK_GRID, plane_size=SENSOR_EXTENT)
    emb = simulate_example(tr.images[0, 0], _cfg(d2=0.004), psf, Rng(0))
    golden = load_tensor(Path(__file__).parent / "data" / "golden_pipeline.ltns")
    assert emb.values.shape == golden.shape
    assert np.max(np.abs(emb.values - golden)) <= 1e-8 * np.max(np.abs(golden))
