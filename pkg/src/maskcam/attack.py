"""Adversary suite for the mask camera.

Convex scene recovery from sensor embeddings by projected gradient descent
(PGD) on 0.5*||y - D H x||^2 with a non-negativity projection, under the
correct or a decoy PSF; plaintext-trained decoders under fixed or varying
masks; and PSNR/SSIM scoring of the reconstructions.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from .learn import adam_init, adam_step
from .optics import (
    DESK_GRID,
    RGB_WAVELENGTHS,
    SENSOR_EXTENT,
    IntensityPsf,
    grid_pitch,
    simulate_psf,
)
from .rng import Rng
from .simcam import (
    SceneConfig,
    downsample,
    fft_convolve,
    interp_matrix,
    prep_scene_batch,
    shot_noise,
)
from .tensorio import write_png_grayscale

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
POWER_ITERS = 30


# ----------------------------------------------------------------- operators


@dataclass(frozen=True)
class _LinearOps:
    """The measurement model A = downsample o convolve as a linear map."""

    kernel_spec: np.ndarray
    grid: tuple
    full: tuple
    ry: np.ndarray
    rx: np.ndarray

    def apply(self, x):
        h, w = self.grid
        conv = np.fft.irfft2(np.fft.rfft2(x, s=self.full) * self.kernel_spec,
                             s=self.full)
        meas = conv[h // 2 : h // 2 + h, w // 2 : w // 2 + w]
        return np.einsum("ah,hw,bw->ab", self.ry, meas, self.rx, optimize=True)

    def adjoint(self, g):
        h, w = self.grid
        inject = np.zeros(self.full)
        inject[h // 2 : h // 2 + h, w // 2 : w // 2 + w] = np.einsum(
            "ah,ab,bw->hw", self.ry, g, self.rx, optimize=True
        )
        corr = np.fft.irfft2(np.conj(self.kernel_spec) * np.fft.rfft2(inject),
                             s=self.full)
        return corr[:h, :w]


def make_operators(kernel, factor):
    """Linear forward/adjoint pair for PSF ``kernel`` and binning ``factor``."""
    h, w = kernel.shape
    full = (2 * h - 1, 2 * w - 1)
    return _LinearOps(
        kernel_spec=np.fft.rfft2(kernel, s=full),
        grid=(h, w),
        full=full,
        ry=interp_matrix(h, h // factor, float(factor)),
        rx=interp_matrix(w, w // factor, float(factor)),
    )


def _power_method(ops, grid, iters=POWER_ITERS):
    """Largest eigenvalue of A^T A (the squared Lipschitz constant)."""
    b = np.ones(grid)
    b /= np.linalg.norm(b)
    lam = 1.0
    for _ in range(iters):
        c = ops.adjoint(ops.apply(b))
        lam = np.linalg.norm(c)
        if lam == 0.0:
            return 1e-30
        b = c / lam
    return lam


# ----------------------------------------------------------------------- pgd


@dataclass(frozen=True)
class ReconProblem:
    """One convex recovery instance: measurement, assumed PSF, and budget."""

    y: np.ndarray  # (h, w) sensor embedding
    psf: IntensityPsf  # full-grid PSF the adversary assumes
    factor: int  # downsample factor D
    iters: int = 500
    step_scale: float = 0.9  # step = step_scale / L

    def __post_init__(self):
        grid = self.psf.values.shape[1:]
        expect = (grid[0] // self.factor, grid[1] // self.factor)
        if tuple(self.y.shape) != expect:
            raise ValueError(
                f"measurement dims {self.y.shape} do not match PSF dims "
                f"{grid} / {self.factor} = {expect}"
            )
        if self.iters < 1:
            raise ValueError("iteration budget must be >= 1")
        if not 0 < self.step_scale <= 1:
            raise ValueError("step scale must be in (0, 1]")


def pgd_reconstruct(problem: ReconProblem, track_objective=False):
    """Projected gradient descent on 0.5*||y - A x||^2 with x >= 0.

    Starts from x = 0 with step 0.9/L, L estimated by 30 power-method
    iterations on A^T A; every iterate is non-negative and the objective is
    non-increasing. Returns the final iterate at PSF resolution (with the
    objective sequence if track_objective).
    """
    kernel = problem.psf.values.mean(axis=0)
    ops = make_operators(kernel, problem.factor)
    step = problem.step_scale / _power_method(ops, kernel.shape)
    x = np.zeros(kernel.shape)
    y = np.asarray(problem.y, dtype=np.float64)
    objectives = []
    for _ in range(problem.iters):
        residual = ops.apply(x) - y
        objective = 0.5 * float(np.sum(residual * residual))
        if not np.isfinite(objective):
            raise RuntimeError("non-finite PGD objective (step size too large?)")
        objectives.append(objective)
        x = np.maximum(x - step * ops.adjoint(residual), 0.0)
    residual = ops.apply(x) - y
    objectives.append(0.5 * float(np.sum(residual * residual)))
    if track_objective:
        return x, np.asarray(objectives)
    return x


def wrong_psf_attack(problem: ReconProblem, true_geometry, rng, weights=None,
                     track_objective=False):
    """Recovery under a decoy PSF.

    Re-randomizes the mask weights from ``rng`` (or uses ``weights``),
    simulates the decoy PSF with the true geometry and distances, and runs
    the same PGD recovery against it.
    """
    psf = problem.psf
    grid = psf.values.shape[1:]
    plane_size = (psf.pitch[0] * grid[0], psf.pitch[1] * grid[1])
    if weights is None:
        weights = rng.uniform((true_geometry.num_subpixels,))
    decoy = simulate_psf(
        true_geometry, weights, psf.d1, psf.d2,
        wavelengths=psf.wavelengths, grid=grid, plane_size=plane_size,
    )
    return pgd_reconstruct(replace(problem, psf=decoy), track_objective)


def simulate_measurement(scene, psf: IntensityPsf, factor, rng=None, snr_db=None):
    """Sensor embedding of one prepped scene under the channel-mean PSF."""
    kernel = psf.values.mean(axis=0)
    y = downsample(fft_convolve(scene, kernel), factor)
    if rng is not None:
        y = shot_noise(y, snr_db, rng)
    return y


# ------------------------------------------------------------------- metrics


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; equal inputs give the inf sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _window_sums(x, win):
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]


def ssim(a, b, win=SSIM_WINDOW, k1=SSIM_K1, k2=SSIM_K2, peak=1.0):
    """Mean structural similarity over sliding uniform windows.

    Uses win x win uniform windows (valid positions only), population
    moments, and the standard stabilized formula with C1 = (k1*peak)^2,
    C2 = (k2*peak)^2.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if min(a.shape) < win:
        raise ValueError(f"image smaller than the {win}x{win} SSIM window")
    n = win * win
    mu_a = _window_sums(a, win) / n
    mu_b = _window_sums(b, win) / n
    var_a = _window_sums(a * a, win) / n - mu_a**2
    var_b = _window_sums(b * b, win) / n - mu_b**2
    cov = _window_sums(a * b, win) / n - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


# ------------------------------------------------------------------- decoder


@dataclass
class DecoderParams:
    """Two-layer plaintext decoder: flattened embedding -> flattened image.

    norm_mean/norm_std standardize raw embeddings per feature; they are the
    training-split statistics, attached by train_decoder().
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    in_shape: tuple
    out_shape: tuple
    norm_mean: np.ndarray = None
    norm_std: np.ndarray = None


def init_decoder(in_shape, out_shape, rng, hidden=1024):
    in_dim = int(np.prod(in_shape))
    out_dim = int(np.prod(out_shape))
    return DecoderParams(
        W1=rng.normal((hidden, in_dim), scale=np.sqrt(2.0 / in_dim)),
        b1=np.zeros(hidden),
        W2=rng.normal((out_dim, hidden), scale=np.sqrt(2.0 / hidden)),
        b2=np.zeros(out_dim),
        in_shape=tuple(in_shape),
        out_shape=tuple(out_shape),
    )


def decoder_forward(params: DecoderParams, embeddings):
    """Decoded images, shaped (N,) + out_shape."""
    x = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    if params.norm_mean is not None:
        x = (x - params.norm_mean) / params.norm_std
    a1 = x @ params.W1.T + params.b1
    out = np.maximum(a1, 0.0) @ params.W2.T + params.b2
    return out.reshape((len(embeddings),) + params.out_shape)


def decoder_metrics(params: DecoderParams, pairs):
    """Mean PSNR/SSIM of clamped decoder outputs against the true images."""
    embeddings, images = pairs
    pred = np.clip(decoder_forward(params, embeddings), 0.0, 1.0)
    scores_p = [psnr(pred[i], images[i]) for i in range(len(images))]
    scores_s = [ssim(pred[i], images[i]) for i in range(len(images))]
    return {"psnr": float(np.mean(scores_p)), "ssim": float(np.mean(scores_s))}


def train_decoder(train_pairs, test_pairs, *, epochs=30, batch_size=32,
                  lr=1e-3, rng=None, hidden=1024):
    """Supervised MSE regression from embeddings to images.

    train_pairs/test_pairs are (embeddings, images) array pairs, as
    produced by the measurement simulation. Embeddings are standardized
    with training-split statistics (kept in the returned parameters, so
    decoder_forward accepts raw embeddings). Returns the decoder
    parameters and the held-out PSNR/SSIM means.
    """
    embeddings, images = train_pairs
    n = len(embeddings)
    if n < batch_size:
        raise ValueError(f"{n} training pairs is fewer than the batch size {batch_size}")
    if rng is None:
        rng = Rng(0)
    x = np.asarray(embeddings, dtype=np.float64).reshape(n, -1)
    t = np.asarray(images, dtype=np.float64).reshape(n, -1)
    params = init_decoder(embeddings.shape[1:], images.shape[1:],
                          rng.split("decoder-init"), hidden=hidden)
    params.norm_mean = x.mean(axis=0)
    std = x.std(axis=0)
    params.norm_std = np.where(std > 1e-12, std, 1.0)
    x = (x - params.norm_mean) / params.norm_std
    opt = {"W1": params.W1, "b1": params.b1, "W2": params.W2, "b2": params.b2}
    state = adam_init(opt)
    for epoch in range(epochs):
        order = rng.split(f"shuffle-{epoch}").permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, tb = x[idx], t[idx]
            a1 = xb @ params.W1.T + params.b1
            r = np.maximum(a1, 0.0)
            out = r @ params.W2.T + params.b2
            diff = out - tb
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise RuntimeError(f"decoder training diverged at epoch {epoch}")
            g_out = 2.0 * diff / diff.size
            g_r = g_out @ params.W2
            g_a1 = g_r * (a1 > 0)
            grads = {
                "W1": g_a1.T @ xb, "b1": g_a1.sum(axis=0),
                "W2": g_out.T @ r, "b2": g_out.sum(axis=0),
            }
            adam_step(opt, grads, state, lr)
    return params, decoder_metrics(params, test_pairs)


def simulate_plaintext_pairs(images, geometry, scene: SceneConfig, n_masks, rng,
                             *, grid=DESK_GRID, plane_size=SENSOR_EXTENT,
                             wavelengths=RGB_WAVELENGTHS):
    """(embedding, image) pairs with masks re-randomized round-robin.

    Item i is measured under mask i % n_masks; every mask is drawn from its
    own stream of ``rng``, and every item's shot noise from a per-item
    stream, so the pairs are reproducible regardless of batching.
    """
    images = np.asarray(images)
    meta = IntensityPsf(
        values=np.zeros((1,) + tuple(grid)), wavelengths=(550e-9,),
        d1=scene.d1, d2=scene.d2, pitch=grid_pitch(grid, plane_size),
    )
    scenes = prep_scene_batch(images, scene, meta)
    kernels = [
        simulate_psf(
            geometry, rng.split(f"mask-{k}").uniform((geometry.num_subpixels,)),
            scene.d1, scene.d2, wavelengths=wavelengths,
            grid=grid, plane_size=plane_size,
        ).values.mean(axis=0)
        for k in range(n_masks)
    ]
    n = len(images)
    factor = scene.downsample
    out = np.empty((n, grid[0] // factor, grid[1] // factor))
    for k, kernel in enumerate(kernels):
        group = np.arange(k, n, n_masks)
        for start in range(0, len(group), 256):  # bound FFT batch memory
            idx = group[start : start + 256]
            meas = downsample(fft_convolve(scenes[idx], kernel), factor)
            for row, i in enumerate(idx):
                out[i] = shot_noise(meas[row], scene.target_snr_db,
                                    rng.split(f"noise-{i}"))
    return out, images.copy()


# -------------------------------------------------------------------- report


def attack_report(images, weights, geometry, scene: SceneConfig, factors,
                  out_dir, *, iters=500, grid=DESK_GRID,
                  plane_size=SENSOR_EXTENT, wavelengths=RGB_WAVELENGTHS,
                  seed=0, n_gallery=3, psf=None, decoy_weights=None, log=None):
    """Good-vs-decoy PGD recovery across embedding resolutions.

    Writes attack.csv (columns resolution,psf_kind,psnr_mean,ssim_mean,
    n_images; one good and one decoy row per resolution) plus a PNG gallery
    of truths and reconstructions. Returns the CSV rows as dicts.

    The true PSF is simulated from ``weights`` unless a prebuilt ``psf`` is
    given; the decoy mask comes from the "decoy" stream of ``seed`` unless
    ``decoy_weights`` is given.
    """
    images = np.asarray(images)
    root = Rng(seed)
    if psf is None:
        psf = simulate_psf(geometry, weights, scene.d1, scene.d2,
                           wavelengths=wavelengths, grid=grid,
                           plane_size=plane_size)
    else:
        grid = psf.values.shape[1:]
        plane_size = (psf.pitch[0] * grid[0], psf.pitch[1] * grid[1])
    if decoy_weights is None:
        decoy_weights = root.split("decoy").uniform((geometry.num_subpixels,))
    decoy = simulate_psf(geometry, decoy_weights, scene.d1, scene.d2,
                         wavelengths=wavelengths, grid=grid, plane_size=plane_size)
    scenes = prep_scene_batch(images, scene, psf)

    os.makedirs(out_dir, exist_ok=True)
    for i in range(min(len(images), n_gallery)):
        write_png_grayscale(np.clip(scenes[i], 0.0, 1.0),
                            os.path.join(out_dir, f"truth_{i:03d}.png"))

    rows = []
    for factor in factors:
        res = f"{grid[0] // factor}x{grid[1] // factor}"
        scores = {"good": {"psnr": [], "ssim": []}, "decoy": {"psnr": [], "ssim": []}}
        for i, truth in enumerate(scenes):
            y = simulate_measurement(
                truth, psf, factor,
                rng=root.split(f"noise-{factor}-{i}"), snr_db=scene.target_snr_db,
            )
            problem = ReconProblem(y=y, psf=psf, factor=factor, iters=iters)
            recons = {
                "good": pgd_reconstruct(problem),
                "decoy": pgd_reconstruct(replace(problem, psf=decoy)),
            }
            for kind, recon in recons.items():
                scores[kind]["psnr"].append(psnr(recon, truth))
                scores[kind]["ssim"].append(ssim(recon, truth))
                if i < n_gallery:
                    scaled = recon / max(float(recon.max()), 1e-12)
                    write_png_grayscale(
                        scaled,
                        os.path.join(out_dir, f"recon_{res}_{kind}_{i:03d}.png"),
                    )
        for kind in ("good", "decoy"):
            row = {
                "resolution": res,
                "psf_kind": kind,
                "psnr_mean": float(np.mean(scores[kind]["psnr"])),
                "ssim_mean": float(np.mean(scores[kind]["ssim"])),
                "n_images": len(images),
            }
            rows.append(row)
            if log:
                log(row)

    with open(os.path.join(out_dir, "attack.csv"), "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["resolution", "psf_kind", "psnr_mean", "ssim_mean", "n_images"]
        )
        writer.writeheader()
        writer.writerows(rows)
    return rows
