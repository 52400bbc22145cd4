"""Sensor measurement pipeline for the mask camera.

Maps a scene image to a low-resolution sensor embedding in four stages:
geometric preparation (magnify, resize, pad, translate), linear shift-
invariant convolution against the intensity PSF, bilinear downsampling to
the readout resolution, and shot noise calibrated to a target SNR.
"""

from dataclasses import dataclass, replace

import numpy as np

from .optics import IntensityPsf

# Photon budget used to draw raw shot noise before SNR rescaling.
NOISE_GAIN = 1000.0


@dataclass(frozen=True)
class SceneConfig:
    """Imaging geometry and acquisition settings for one simulation."""

    h_obj: float  # physical object height [m]
    d1: float  # scene-to-mask distance [m]
    d2: float  # mask-to-sensor distance [m]
    downsample: int  # sensor binning factor (>= 1)
    target_snr_db: float  # shot-noise calibration target [dB]
    shift: tuple = (0.0, 0.0)  # object-plane offset (dy, dx) [m]

    def __post_init__(self):
        if self.h_obj <= 0 or self.d1 <= 0 or self.d2 <= 0:
            raise ValueError("h_obj, d1 and d2 must be positive")
        if not isinstance(self.downsample, (int, np.integer)) or self.downsample < 1:
            raise ValueError("downsample factor must be an integer >= 1")
        if len(self.shift) != 2:
            raise ValueError("shift must be an object-plane (dy, dx) pair")

    @property
    def magnification(self):
        """Signed lateral magnification of the pinhole-like geometry."""
        return -self.d2 / self.d1


@dataclass(frozen=True)
class SensorEmbedding:
    """Low-resolution sensor measurement with its acquisition provenance."""

    values: np.ndarray  # (C, h, w), >= 0
    config: SceneConfig
    psf_hash: str = ""

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("embedding values must be (C, h, w)")


def interp_matrix(n_in, n_out, scale=None):
    """Sparse-in-rows bilinear interpolation matrix (n_out x n_in).

    Output sample o reads input position (o + 0.5) * scale - 0.5 with
    half-pixel-centre alignment; scale defaults to n_in / n_out. Each row
    has at most two non-zeros and sums to one, so constants are preserved
    and the exact adjoint is the transpose.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("interpolation needs at least one sample per axis")
    if scale is None:
        scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    pos = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1.0)
    i0 = np.minimum(pos.astype(int), n_in - 1)
    frac = pos - i0
    rows = np.arange(n_out)
    mat[rows, i0] += 1.0 - frac
    inside = i0 + 1 <= n_in - 1
    mat[rows[inside], i0[inside] + 1] += frac[inside]
    return mat


def resize_bilinear(image, out_shape, scale=None):
    """Resize the trailing two axes of ``image`` to ``out_shape``."""
    ry = interp_matrix(image.shape[-2], out_shape[0], scale)
    rx = interp_matrix(image.shape[-1], out_shape[1], scale)
    return np.einsum("ah,...hw,bw->...ab", ry, image, rx, optimize=True)


def prep_scene(image, cfg: SceneConfig, psf: IntensityPsf):
    """Place a scene image on the PSF simulation grid.

    The object of height ``cfg.h_obj`` is demagnified onto the sensor,
    resized to the equivalent pixel count, zero-padded to the PSF grid
    (centered; odd remainders pad the bottom/right), and translated by the
    pixel equivalent of the object-plane shift. Grayscale input broadcasts
    across the PSF channels.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError("scene image must be (H, W) or (C, H, W)")
    channels, grid_h, grid_w = psf.values.shape
    if image.shape[0] == 1 and channels > 1:
        image = np.broadcast_to(image, (channels,) + image.shape[1:])
    elif image.shape[0] != channels:
        raise ValueError(
            f"scene has {image.shape[0]} channels but the PSF has {channels}"
        )

    mag = abs(cfg.magnification)
    out_h = int(round(cfg.h_obj * mag / psf.pitch[0]))
    if out_h < 1:
        raise ValueError("object projects to less than one sensor-grid pixel")
    scale = out_h / image.shape[1]
    out_w = int(round(image.shape[2] * scale))
    if out_h > grid_h or out_w > grid_w:
        raise ValueError(
            f"object span {out_h}x{out_w} px does not fit the {grid_h}x{grid_w} grid"
        )

    resized = resize_bilinear(image, (out_h, out_w))
    row = (grid_h - out_h) // 2 + int(round(cfg.shift[0] * mag / psf.pitch[0]))
    col = (grid_w - out_w) // 2 + int(round(cfg.shift[1] * mag / psf.pitch[1]))
    if row < 0 or col < 0 or row + out_h > grid_h or col + out_w > grid_w:
        raise ValueError("shift pushes the object outside the sensor frame")
    scene = np.zeros((channels, grid_h, grid_w), dtype=resized.dtype)
    scene[:, row : row + out_h, col : col + out_w] = resized
    return scene


def prep_scene_batch(images, cfg: SceneConfig, psf: IntensityPsf):
    """Place a batch of same-sized grayscale scenes on the PSF grid at once.

    Same geometry as prep_scene — demagnify, bilinear-resize, center with
    shift, zero-pad — but vectorized over (N, H, W) input, returning
    (N, grid_h, grid_w) without the per-channel broadcast.
    """
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError("scene batch must be (N, H, W)")
    _, grid_h, grid_w = psf.values.shape

    mag = abs(cfg.magnification)
    out_h = int(round(cfg.h_obj * mag / psf.pitch[0]))
    if out_h < 1:
        raise ValueError("object projects to less than one sensor-grid pixel")
    scale = out_h / images.shape[1]
    out_w = int(round(images.shape[2] * scale))
    if out_h > grid_h or out_w > grid_w:
        raise ValueError(
            f"object span {out_h}x{out_w} px does not fit the {grid_h}x{grid_w} grid"
        )

    resized = resize_bilinear(images, (out_h, out_w))
    row = (grid_h - out_h) // 2 + int(round(cfg.shift[0] * mag / psf.pitch[0]))
    col = (grid_w - out_w) // 2 + int(round(cfg.shift[1] * mag / psf.pitch[1]))
    if row < 0 or col < 0 or row + out_h > grid_h or col + out_w > grid_w:
        raise ValueError("shift pushes the object outside the sensor frame")
    scenes = np.zeros((images.shape[0], grid_h, grid_w), dtype=resized.dtype)
    scenes[:, row : row + out_h, col : col + out_w] = resized
    return scenes


def fft_convolve(scene, psf):
    """Linear (non-circular) 2-D convolution of scene and PSF, same size.

    Both arrays are zero-padded to (2H-1) x (2W-1), multiplied in the
    frequency domain, and the result is cropped so that a unit PSF pixel at
    (H//2, W//2) acts as the identity. Leading axes broadcast, so a batch
    of scenes can share one PSF. Round-off negatives are clamped to zero.
    """
    scene = np.asarray(scene)
    psf = np.asarray(psf)
    if scene.shape[-2:] != psf.shape[-2:]:
        raise ValueError(
            f"scene dims {scene.shape[-2:]} and PSF dims {psf.shape[-2:]} differ"
        )
    h, w = scene.shape[-2:]
    full = (2 * h - 1, 2 * w - 1)
    spec = np.fft.rfft2(scene, s=full) * np.fft.rfft2(psf, s=full)
    out = np.fft.irfft2(spec, s=full)[..., h // 2 : h // 2 + h, w // 2 : w // 2 + w]
    return np.clip(out, 0.0, None)


def downsample(image, factor):
    """Bilinear half-pixel-aligned binning of the trailing two axes.

    Output dims are floor(H / factor) x floor(W / factor); factor 1 is the
    identity.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError("downsample factor must be an integer >= 1")
    if factor == 1:
        return np.asarray(image).copy()
    h, w = image.shape[-2:]
    if h // factor < 1 or w // factor < 1:
        raise ValueError(f"factor {factor} empties a {h}x{w} image")
    return resize_bilinear(image, (h // factor, w // factor), scale=float(factor))


def shot_noise(image, target_snr_db, rng, gain=NOISE_GAIN):
    """Add Poisson shot noise rescaled to an exact target SNR.

    A raw noise realization n0 = Poisson(gain * image) / gain - image is
    rescaled by k = sqrt(var(image) / (var(n0) * 10^(SNR/10))) so the
    realized pre-clamp SNR matches ``target_snr_db`` exactly; the noisy
    image is then clamped to be non-negative.
    """
    image = np.asarray(image)
    if np.any(image < 0):
        raise ValueError("shot noise requires a non-negative image")
    signal_var = float(image.var())
    if signal_var == 0.0:
        raise ValueError("image has zero signal variance; SNR is undefined")
    raw = rng.poisson(image * gain) / gain - image
    noise_var = float(raw.var())
    if noise_var == 0.0:
        raise ValueError("noise realization has zero variance")
    k = np.sqrt(signal_var / (noise_var * 10.0 ** (target_snr_db / 10.0)))
    return np.clip(image + k * raw, 0.0, None).astype(image.dtype, copy=False)


def collapse_grayscale(psf: IntensityPsf) -> IntensityPsf:
    """Average the PSF channels into a single panchromatic channel."""
    return replace(
        psf,
        values=psf.values.mean(axis=0, keepdims=True),
        wavelengths=(float(np.mean(psf.wavelengths)),),
    )


def simulate_example(image, cfg: SceneConfig, psf: IntensityPsf, rng, grayscale=True):
    """Full scene-to-embedding simulation for one image.

    Prepares the scene on the PSF grid, convolves with the (optionally
    channel-averaged) PSF, downsamples to the readout resolution, and adds
    SNR-calibrated shot noise.
    """
    kernel = collapse_grayscale(psf) if grayscale else psf
    scene = prep_scene(image, cfg, kernel)
    measured = fft_convolve(scene, kernel.values)
    low = downsample(measured, cfg.downsample)
    noisy = shot_noise(low, cfg.target_snr_db, rng)
    return SensorEmbedding(values=noisy, config=cfg, psf_hash=psf.geometry_hash)
