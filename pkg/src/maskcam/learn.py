"""End-to-end learning on sensor embeddings.

Implements the classifiers, losses, optimizers, and embedding normalization
for both encoder modes, plus hand-derived reverse-mode gradients through the
differentiable simulation chain (rasterized mask -> spherical illumination
-> free-space propagation -> intensity PSF -> scene convolution -> bilinear
downsampling) so the mask weights can be optimized jointly with the
classifier. Shot noise is applied in the forward pass and treated as an
additive constant in the backward pass.
"""

from dataclasses import dataclass, field

import numpy as np

from .optics import (
    DESK_GRID,
    RGB_WAVELENGTHS,
    SENSOR_EXTENT,
    IntensityPsf,
    footprint_slices,
    grid_pitch,
    rasterize_mask,
    spherical_wavefront,
    transfer_values,
)
from .rng import Rng
from .simcam import interp_matrix, prep_scene_batch, shot_noise

PROB_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STD_FLOOR = 1e-8

ARCHITECTURES = ("LR", "FC800")
OPTIMIZERS = ("adam", "sgd")
ENCODER_MODES = ("fixed", "learned")


# -------------------------------------------------------------------- losses


def softmax(logits):
    """Row-wise softmax over the last axis, shift-stabilized."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_entropy(scores, labels):
    """Mean negative log-probability of the labels; probabilities floored
    at 1e-12 so a zero score yields a large finite loss."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores = scores[None]
        labels = labels.reshape(1)
    picked = scores[np.arange(scores.shape[0]), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def bce(scores, labels):
    """Mean binary cross-entropy of sigmoid scores against {0,1} labels."""
    s = np.clip(np.asarray(scores, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)).mean())


# --------------------------------------------------------------- classifiers


@dataclass
class ClassifierParams:
    """Named parameter tensors of one classifier head."""

    architecture: str  # "LR" | "FC800"
    tensors: dict  # name -> ndarray; FC800 includes (untrained) running stats

    @property
    def trainable(self):
        if self.architecture == "LR":
            return ("W", "b")
        return ("W1", "b1", "gamma", "beta", "W2", "b2")

    def snapshot(self):
        return ClassifierParams(
            self.architecture, {k: v.copy() for k, v in self.tensors.items()}
        )


def init_classifier(architecture, in_dim, num_classes=10, rng=None, hidden=800):
    """Fresh parameters: LR starts at zero (convex); FC800 uses He init."""
    if architecture == "LR":
        tensors = {
            "W": np.zeros((num_classes, in_dim)),
            "b": np.zeros(num_classes),
        }
    elif architecture == "FC800":
        if rng is None:
            raise ValueError("FC800 initialization requires an rng")
        tensors = {
            "W1": rng.normal((hidden, in_dim), scale=np.sqrt(2.0 / in_dim)),
            "b1": np.zeros(hidden),
            "gamma": np.ones(hidden),
            "beta": np.zeros(hidden),
            "running_mean": np.zeros(hidden),
            "running_var": np.ones(hidden),
            "W2": rng.normal((num_classes, hidden), scale=np.sqrt(2.0 / hidden)),
            "b2": np.zeros(num_classes),
        }
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    return ClassifierParams(architecture, tensors)


def _flatten(embedding, in_dim):
    x = np.asarray(embedding)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if x.shape[1] != in_dim:
        raise ValueError(f"embedding dim {x.shape[1]} != classifier dim {in_dim}")
    return x, single


def _scores_from_logits(logits):
    if logits.shape[1] == 1:
        return sigmoid(logits[:, 0])
    return softmax(logits)


def classifier_forward(params: ClassifierParams, embedding, train_mode=False):
    """Class scores plus the cache needed for the backward pass."""
    t = params.tensors
    if params.architecture == "LR":
        x, _ = _flatten(embedding, t["W"].shape[1])
        logits = x @ t["W"].T + t["b"]
        scores = _scores_from_logits(logits)
        return scores, {"x": x, "scores": scores}

    x, _ = _flatten(embedding, t["W1"].shape[1])
    a1 = x @ t["W1"].T + t["b1"]
    if train_mode:
        mu = a1.mean(axis=0)
        var = a1.var(axis=0)
        t["running_mean"][:] = (1 - BN_MOMENTUM) * t["running_mean"] + BN_MOMENTUM * mu
        t["running_var"][:] = (1 - BN_MOMENTUM) * t["running_var"] + BN_MOMENTUM * var
    else:
        mu, var = t["running_mean"], t["running_var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (a1 - mu) * inv
    h = t["gamma"] * xhat + t["beta"]
    r = np.maximum(h, 0.0)
    logits = r @ t["W2"].T + t["b2"]
    scores = _scores_from_logits(logits)
    return scores, {
        "x": x, "xhat": xhat, "inv": inv, "h": h, "r": r,
        "scores": scores, "train_mode": train_mode,
    }


def classifier_backward(params: ClassifierParams, cache, labels):
    """Gradients of the mean cross-entropy w.r.t. parameters and input."""
    t = params.tensors
    scores = cache["scores"]
    labels = np.asarray(labels)
    n = scores.shape[0]
    if scores.ndim == 1:  # binary sigmoid head
        g_logits = ((scores - labels) / n)[:, None]
    else:
        g_logits = scores.copy()
        g_logits[np.arange(n), labels] -= 1.0
        g_logits /= n

    if params.architecture == "LR":
        x = cache["x"]
        grads = {"W": g_logits.T @ x, "b": g_logits.sum(axis=0)}
        return grads, g_logits @ t["W"]

    x, xhat, inv, h, r = cache["x"], cache["xhat"], cache["inv"], cache["h"], cache["r"]
    g_r = g_logits @ t["W2"]
    g_h = g_r * (h > 0)
    g_gamma = (g_h * xhat).sum(axis=0)
    g_beta = g_h.sum(axis=0)
    g_xhat = g_h * t["gamma"]
    if cache["train_mode"]:
        m = xhat.shape[0]
        g_a1 = (inv / m) * (
            m * g_xhat - g_xhat.sum(axis=0) - xhat * (g_xhat * xhat).sum(axis=0)
        )
    else:
        g_a1 = g_xhat * inv
    grads = {
        "W1": g_a1.T @ x, "b1": g_a1.sum(axis=0),
        "gamma": g_gamma, "beta": g_beta,
        "W2": g_logits.T @ r, "b2": g_logits.sum(axis=0),
    }
    return grads, g_a1 @ t["W1"]


def forward_lr(params: ClassifierParams, embedding):
    """Softmax scores of the logistic-regression head (sigmoid if binary)."""
    if params.architecture != "LR":
        raise ValueError("forward_lr requires LR parameters")
    x, single = _flatten(embedding, params.tensors["W"].shape[1])
    scores, _ = classifier_forward(params, x)
    return scores[0] if single else scores


def forward_fc(params: ClassifierParams, embedding, train_mode=False):
    """Softmax scores of the FC800 head (batch-norm + ReLU hidden layer)."""
    if params.architecture != "FC800":
        raise ValueError("forward_fc requires FC800 parameters")
    x, single = _flatten(embedding, params.tensors["W1"].shape[1])
    scores, _ = classifier_forward(params, x, train_mode=train_mode)
    return scores[0] if single else scores


def classify(params: ClassifierParams, embeddings):
    """Class scores for raw (un-normalized) sensor embeddings.

    Applies whatever input normalization the classifier was trained with:
    train-split standardization for fixed encoders, batch norm + ReLU in
    eval mode for learned encoders (train() attaches the statistics to the
    returned parameters). Accepts a single embedding or a batch.
    """
    t = params.tensors
    in_dim = t["W"].shape[1] if params.architecture == "LR" else t["W1"].shape[1]
    x, single = _flatten(embeddings, in_dim)
    if "norm_mean" in t:
        x = (x - t["norm_mean"]) / t["norm_std"]
    elif "norm_gamma" in t:
        norm = EmbeddingNorm(t["norm_gamma"], t["norm_beta"],
                             t["norm_running_mean"], t["norm_running_var"])
        x, _ = norm.forward(x, train_mode=False)
    scores, _ = classifier_forward(params, x)
    return scores[0] if single else scores


# ------------------------------------------------------------- normalization


@dataclass(frozen=True)
class Normalizer:
    """Per-feature standardization with train-split statistics."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        flat = values.reshape(values.shape[0], -1)
        return ((flat - self.mean) / self.std).reshape(values.shape)


def normalize_embeddings(train_values) -> Normalizer:
    """Fit the fixed-encoder normalization transform on the train split only.

    Features with zero spread get their deviation floored at 1e-8, mapping
    constants to exactly zero.
    """
    flat = np.asarray(train_values, dtype=np.float64).reshape(train_values.shape[0], -1)
    return Normalizer(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))


class EmbeddingNorm:
    """Learned-encoder normalization: batch norm + ReLU inside the graph."""

    def __init__(self, gamma, beta, running_mean, running_var,
                 momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps

    @classmethod
    def create(cls, dim):
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim))

    def snapshot(self):
        return EmbeddingNorm(
            self.gamma.copy(), self.beta.copy(),
            self.running_mean.copy(), self.running_var.copy(),
            self.momentum, self.eps,
        )

    def forward(self, x, train_mode):
        if train_mode:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        h = self.gamma * xhat + self.beta
        y = np.maximum(h, 0.0)
        return y, {"xhat": xhat, "inv": inv, "h": h, "train_mode": train_mode}

    def backward(self, cache, g_y):
        xhat, inv, h = cache["xhat"], cache["inv"], cache["h"]
        g_h = g_y * (h > 0)
        g_gamma = (g_h * xhat).sum(axis=0)
        g_beta = g_h.sum(axis=0)
        g_xhat = g_h * self.gamma
        if cache["train_mode"]:
            m = xhat.shape[0]
            g_x = (inv / m) * (
                m * g_xhat - g_xhat.sum(axis=0) - xhat * (g_xhat * xhat).sum(axis=0)
            )
        else:
            g_x = g_xhat * inv
        return g_x, g_gamma, g_beta


# ----------------------------------------------------------------- optimizers


def adam_init(params):
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place Adam update with bias correction."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for key, g in grads.items():
        m = state["m"][key]
        v = state["v"][key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        params[key] -= lr * mhat / (np.sqrt(vhat) + eps)


def sgd_step(params, grads, state, lr):
    """In-place plain gradient step p <- p - lr * g."""
    for key, g in grads.items():
        params[key] -= lr * g


# ------------------------------------------------- differentiable simulation


@dataclass
class GradTape:
    """Recorded forward intermediates of one simulated batch.

    Holds everything the hand-rolled backward pass needs: the fine-grid
    mask, per-wavelength complex fields, the PSF, cached scene spectra, the
    pre/post-downsample tensors, the constant noise realization, and
    snapshots of the classifier/normalization parameters so the batch can
    be replayed bit-for-bit.
    """

    w: np.ndarray
    geometry: object
    grid: tuple
    plane_size: tuple
    d1: float
    d2: float
    wavelengths: tuple
    factor: int
    slices: tuple
    sph: np.ndarray  # (C, H, W) complex illumination
    hxfer: np.ndarray  # (C, H, W) transfer functions
    u2: np.ndarray  # (C, H, W) complex sensor-plane fields
    psf_gray: np.ndarray  # (H, W) channel-averaged intensity PSF
    scenes: np.ndarray  # (N, H, W)
    scene_spec: np.ndarray  # cached rfft2 of zero-padded scenes
    positive: np.ndarray  # (N, H, W) mask of strictly positive measurements
    ry: np.ndarray
    rx: np.ndarray
    noise: object  # (N, h, w) constant noise or None
    embeddings: np.ndarray  # (N, h, w) post-noise
    labels: np.ndarray
    loss: float
    norm_cache: dict = field(repr=False, default=None)
    clf_cache: dict = field(repr=False, default=None)
    clf_snapshot: ClassifierParams = field(repr=False, default=None)
    norm_snapshot: EmbeddingNorm = field(repr=False, default=None)


def forward_batch(w, geometry, scenes, labels, clf, norm, *, d1, d2, factor,
                  grid=DESK_GRID, plane_size=SENSOR_EXTENT,
                  wavelengths=RGB_WAVELENGTHS, noise=None, noise_rng=None,
                  snr_db=None, dtype=np.float64):
    """Differentiable forward pass of one batch, recorded on a GradTape.

    scenes: (N, H, W) grayscale scenes already placed on the simulation
    grid. Noise is either a fixed array, or drawn per item from noise_rng
    at snr_db; both enter the graph as additive constants.
    """
    w = np.asarray(w, dtype=np.float64)
    scenes = np.asarray(scenes, dtype=dtype)
    labels = np.asarray(labels)
    cdtype = np.complex64 if dtype == np.float32 else np.complex128
    h, wid = grid

    slices = footprint_slices(geometry, grid, plane_size)
    masks = rasterize_mask(geometry, w, grid, plane_size, dtype=dtype)
    pitch = grid_pitch(grid, plane_size)
    sph = np.stack(
        [spherical_wavefront(grid, pitch, d1, wl).values for wl in wavelengths]
    ).astype(cdtype)
    hxfer = np.stack(
        [transfer_values(grid, plane_size, d2, wl) for wl in wavelengths]
    ).astype(cdtype)

    u2 = np.fft.ifft2(np.fft.fft2(sph * masks[: len(wavelengths)]) * hxfer)
    psf_gray = (u2.real**2 + u2.imag**2).mean(axis=0)

    full = (2 * h - 1, 2 * wid - 1)
    scene_spec = np.fft.rfft2(scenes, s=full)
    conv = np.fft.irfft2(scene_spec * np.fft.rfft2(psf_gray, s=full), s=full)
    meas = conv[:, h // 2 : h // 2 + h, wid // 2 : wid // 2 + wid]
    positive = meas > 0
    meas = np.where(positive, meas, 0.0)

    ry = interp_matrix(h, h // factor, float(factor))
    rx = interp_matrix(wid, wid // factor, float(factor))
    v = np.einsum("ah,nhw,bw->nab", ry, meas, rx, optimize=True)

    if noise is None and noise_rng is not None:
        noisy = np.stack(
            [shot_noise(v[i], snr_db, noise_rng) for i in range(v.shape[0])]
        )
        noise = noisy - v
    embeddings = v + noise if noise is not None else v

    x = embeddings.reshape(embeddings.shape[0], -1).astype(np.float64)
    clf_snapshot = clf.snapshot()
    norm_snapshot = norm.snapshot()
    y, norm_cache = norm.forward(x, train_mode=True)
    scores, clf_cache = classifier_forward(clf, y, train_mode=True)
    loss = cross_entropy(scores, labels)

    tape = GradTape(
        w=w, geometry=geometry, grid=tuple(grid), plane_size=tuple(plane_size),
        d1=d1, d2=d2, wavelengths=tuple(wavelengths), factor=factor,
        slices=slices, sph=sph, hxfer=hxfer, u2=u2, psf_gray=psf_gray,
        scenes=scenes, scene_spec=scene_spec, positive=positive,
        ry=ry, rx=rx, noise=noise, embeddings=embeddings, labels=labels,
        loss=loss, norm_cache=norm_cache, clf_cache=clf_cache,
        clf_snapshot=clf_snapshot, norm_snapshot=norm_snapshot,
    )
    return loss, scores, tape


def replay(tape: GradTape):
    """Recompute the recorded loss from the tape's inputs and snapshots."""
    loss, _, _ = forward_batch(
        tape.w, tape.geometry, tape.scenes, tape.labels,
        tape.clf_snapshot.snapshot(), tape.norm_snapshot.snapshot(),
        d1=tape.d1, d2=tape.d2, factor=tape.factor, grid=tape.grid,
        plane_size=tape.plane_size, wavelengths=tape.wavelengths,
        noise=tape.noise, dtype=tape.scenes.dtype.type,
    )
    return loss


def grad_wrt_mask(tape: GradTape, upstream):
    """Exact reverse-mode gradient of the batch loss w.r.t. the mask weights.

    upstream is dLoss/dEmbeddings, shaped like tape.embeddings. Noise is an
    additive constant, so the gradient passes through unchanged; all other
    stages use their exact adjoints. Complex gradients use the carrier
    g = dL/dRe(u) + i*dL/dIm(u), under which |u|^2 backpropagates as 2*u*g
    and any C-linear map A backpropagates as A^H.
    """
    g_v = np.asarray(upstream)
    if g_v.shape != tape.embeddings.shape:
        raise ValueError("upstream gradient dims do not match the embeddings")
    h, wid = tape.grid
    n = g_v.shape[0]

    # adjoint of bilinear downsampling
    g_meas = np.einsum("ah,nab,bw->nhw", tape.ry, g_v, tape.rx, optimize=True)
    g_meas = g_meas * tape.positive  # adjoint of the round-off clamp

    # adjoint of crop -> inject, then correlation with the cached scenes
    full = (2 * h - 1, 2 * wid - 1)
    inject = np.zeros((n,) + full, dtype=g_meas.dtype)
    inject[:, h // 2 : h // 2 + h, wid // 2 : wid // 2 + wid] = g_meas
    spec = (np.conj(tape.scene_spec) * np.fft.rfft2(inject, s=full)).sum(axis=0)
    g_psf_gray = np.fft.irfft2(spec, s=full)[:h, :wid]

    # channel mean, |u|^2, propagation, illumination, rasterization adjoints
    g_p = g_psf_gray / len(tape.wavelengths)
    g_u2 = 2.0 * tape.u2 * g_p
    g_u0 = np.fft.ifft2(np.conj(tape.hxfer) * np.fft.fft2(g_u2))
    g_m = (np.conj(tape.sph) * g_u0).real

    channels, (row_lo, row_hi), (col_lo, col_hi) = tape.slices
    rows, cols = tape.geometry.grid
    g_w = np.zeros(rows * cols)
    for i in range(rows):
        for j in range(cols):
            g_w[i * cols + j] = g_m[
                channels[j], row_lo[i] : row_hi[i], col_lo[j] : col_hi[j]
            ].sum()
    return g_w


def backward_batch(tape: GradTape):
    """Full backward pass of a recorded batch.

    Returns (mask gradient, classifier gradients, normalization gradients).
    """
    clf = tape.clf_snapshot
    grads_clf, g_y = classifier_backward(clf, tape.clf_cache, tape.labels)
    g_x, g_gamma, g_beta = tape.norm_snapshot.backward(tape.norm_cache, g_y)
    g_w = grad_wrt_mask(tape, g_x.reshape(tape.embeddings.shape))
    return g_w, grads_clf, {"gamma": g_gamma, "beta": g_beta}


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    epochs: int
    batch_size: int
    optimizer: str  # "adam" | "sgd"
    lr: float
    seed: int
    encoder_mode: str  # "fixed" | "learned"
    architecture: str = "LR"
    lr_decay_epochs: int = 0  # 0 disables the schedule
    lr_decay_factor: float = 0.1
    embedding_dim: tuple = None
    hidden: int = 800

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"encoder mode must be one of {ENCODER_MODES}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")

    def lr_at(self, epoch):
        if self.lr_decay_epochs > 0:
            return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_epochs)
        return self.lr


def _check_finite(loss, epoch, batch):
    if not np.isfinite(loss):
        raise RuntimeError(
            f"training diverged: loss={loss} at epoch {epoch}, batch {batch}"
        )


def _accuracy(scores, labels):
    return float((scores.argmax(axis=-1) == labels).mean())


def _make_step(config):
    if config.optimizer == "adam":
        return adam_step
    return sgd_step


def train(config: TrainConfig, dataset, geometry=None, scene=None, *,
          grid=DESK_GRID, plane_size=SENSOR_EXTENT, prepped=False,
          wavelengths=RGB_WAVELENGTHS, dtype=np.float64, log=None):
    """Train a classifier, optionally jointly with the mask weights.

    dataset: {"train": LabeledDataset, "test": LabeledDataset}. In fixed
    mode the dataset items are precomputed sensor embeddings (or any
    feature tensors). In learned mode the items are scene images; they are
    placed on the simulation grid (already done if prepped=True) and the
    mask weights are updated jointly with the classifier per batch, with a
    fresh PSF simulated for every batch and w projected back into [0, 1]
    after every step.

    Returns (mask weights or None, ClassifierParams, per-epoch history).
    The returned classifier carries the input-normalization statistics it
    was trained with, so classify() can score raw embeddings directly.
    """
    root = Rng(config.seed)
    if config.encoder_mode == "fixed":
        return _train_fixed(config, dataset, root, log)
    if geometry is None or scene is None:
        raise ValueError("learned mode requires a mask geometry and a SceneConfig")
    return _train_learned(config, dataset, geometry, scene, grid, plane_size,
                          prepped, wavelengths, dtype, root, log)


def _train_fixed(config, dataset, root, log):
    train_ds, test_ds = dataset["train"], dataset["test"]
    norm = normalize_embeddings(train_ds.images)
    x_train = norm.apply(train_ds.images).reshape(len(train_ds), -1)
    x_test = norm.apply(test_ds.images).reshape(len(test_ds), -1)
    y_train, y_test = train_ds.labels, test_ds.labels

    clf = init_classifier(config.architecture, x_train.shape[1],
                          num_classes=train_ds.num_classes,
                          rng=root.split("classifier-init"), hidden=config.hidden)
    opt_params = {k: clf.tensors[k] for k in clf.trainable}
    state = adam_init(opt_params)
    step = _make_step(config)

    history = []
    n = x_train.shape[0]
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = root.split(f"shuffle-{epoch}").permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            scores, cache = classifier_forward(clf, x_train[idx], train_mode=True)
            loss = cross_entropy(scores, y_train[idx])
            _check_finite(loss, epoch, start // config.batch_size)
            grads, _ = classifier_backward(clf, cache, y_train[idx])
            step(opt_params, grads, state, lr)
            losses.append(loss)
        entry = {
            "epoch": epoch,
            "train_acc": _accuracy(classifier_forward(clf, x_train)[0], y_train),
            "test_acc": _accuracy(classifier_forward(clf, x_test)[0], y_test),
            "loss": float(np.mean(losses)),
        }
        history.append(entry)
        if log:
            log(entry)
    clf.tensors["norm_mean"] = norm.mean
    clf.tensors["norm_std"] = norm.std
    return None, clf, history


def _grayscale_images(images):
    arr = np.asarray(images)
    if arr.ndim == 4:
        return arr.mean(axis=1)
    return arr


def _prep_all(images, scene, grid, plane_size, dtype):
    """Place every (grayscale) image on the simulation grid."""
    meta = IntensityPsf(
        values=np.zeros((1,) + tuple(grid)), wavelengths=(550e-9,),
        d1=scene.d1, d2=scene.d2, pitch=grid_pitch(grid, plane_size),
    )
    return prep_scene_batch(images, scene, meta).astype(dtype)


def embed_scenes(psf_gray, scenes, factor, snr_db, noise_rng, batch=200):
    """Precompute sensor embeddings of prepped scenes under one PSF.

    Convolves each scene with the grayscale PSF, crops to the sensor
    window, downsamples by `factor`, and (when `noise_rng` is given)
    applies shot noise calibrated to `snr_db`. This is the fixed-encoder
    dataset preparation: embeddings are drawn once and reused across
    training epochs.
    """
    h, wid = psf_gray.shape
    full = (2 * h - 1, 2 * wid - 1)
    ry = interp_matrix(h, h // factor, float(factor))
    rx = interp_matrix(wid, wid // factor, float(factor))
    kernel = np.fft.rfft2(psf_gray, s=full)
    chunks = []
    for start in range(0, scenes.shape[0], batch):
        block = scenes[start : start + batch]
        conv = np.fft.irfft2(np.fft.rfft2(block, s=full) * kernel, s=full)
        meas = conv[:, h // 2 : h // 2 + h, wid // 2 : wid // 2 + wid]
        meas = np.clip(meas, 0.0, None)
        v = np.einsum("ah,nhw,bw->nab", ry, meas, rx, optimize=True)
        if noise_rng is not None:
            v = np.stack([shot_noise(v[i], snr_db, noise_rng) for i in range(len(v))])
        chunks.append(v)
    return np.concatenate(chunks, axis=0)


def _simulate_psf_gray(w, geometry, grid, plane_size, d1, d2, wavelengths, dtype):
    masks = rasterize_mask(geometry, w, grid, plane_size, dtype=dtype)
    pitch = grid_pitch(grid, plane_size)
    cdtype = np.complex64 if dtype == np.float32 else np.complex128
    sph = np.stack(
        [spherical_wavefront(grid, pitch, d1, wl).values for wl in wavelengths]
    ).astype(cdtype)
    hxfer = np.stack(
        [transfer_values(grid, plane_size, d2, wl) for wl in wavelengths]
    ).astype(cdtype)
    u2 = np.fft.ifft2(np.fft.fft2(sph * masks[: len(wavelengths)]) * hxfer)
    return (u2.real**2 + u2.imag**2).mean(axis=0)


def _train_learned(config, dataset, geometry, scene, grid, plane_size,
                   prepped, wavelengths, dtype, root, log):
    train_ds, test_ds = dataset["train"], dataset["test"]
    imgs_train = _grayscale_images(train_ds.images)
    imgs_test = _grayscale_images(test_ds.images)
    if prepped:
        scenes_train = imgs_train.astype(dtype)
        scenes_test = imgs_test.astype(dtype)
    else:
        scenes_train = _prep_all(imgs_train, scene, grid, plane_size, dtype)
        scenes_test = _prep_all(imgs_test, scene, grid, plane_size, dtype)
    y_train, y_test = train_ds.labels, test_ds.labels

    factor = scene.downsample
    dim = (grid[0] // factor) * (grid[1] // factor)
    w = root.split("mask-init").uniform((geometry.num_subpixels,))
    clf = init_classifier(config.architecture, dim,
                          num_classes=train_ds.num_classes,
                          rng=root.split("classifier-init"), hidden=config.hidden)
    norm = EmbeddingNorm.create(dim)

    opt_params = {"mask": w}
    opt_params.update({f"clf.{k}": clf.tensors[k] for k in clf.trainable})
    opt_params.update({"norm.gamma": norm.gamma, "norm.beta": norm.beta})
    state = adam_init(opt_params)
    step = _make_step(config)
    snr_db = scene.target_snr_db

    history = []
    n = scenes_train.shape[0]
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = root.split(f"shuffle-{epoch}").permutation(n)
        noise_rng = root.split(f"noise-{epoch}")
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, _, tape = forward_batch(
                w, geometry, scenes_train[idx], y_train[idx], clf, norm,
                d1=scene.d1, d2=scene.d2, factor=factor, grid=grid,
                plane_size=plane_size, wavelengths=wavelengths,
                noise_rng=noise_rng, snr_db=snr_db, dtype=dtype,
            )
            _check_finite(loss, epoch, start // config.batch_size)
            g_w, grads_clf, grads_norm = backward_batch(tape)
            grads = {"mask": g_w}
            grads.update({f"clf.{k}": v for k, v in grads_clf.items()})
            grads.update({"norm.gamma": grads_norm["gamma"],
                          "norm.beta": grads_norm["beta"]})
            step(opt_params, grads, state, lr)
            np.clip(w, 0.0, 1.0, out=w)
            losses.append(loss)

        psf_gray = _simulate_psf_gray(w, geometry, grid, plane_size,
                                      scene.d1, scene.d2, wavelengths, dtype)
        eval_rng = root.split(f"eval-noise-{epoch}")
        emb_train = embed_scenes(psf_gray, scenes_train, factor, snr_db, eval_rng)
        emb_test = embed_scenes(psf_gray, scenes_test, factor, snr_db, eval_rng)
        xt, _ = norm.forward(emb_train.reshape(len(emb_train), -1), train_mode=False)
        xv, _ = norm.forward(emb_test.reshape(len(emb_test), -1), train_mode=False)
        entry = {
            "epoch": epoch,
            "train_acc": _accuracy(classifier_forward(clf, xt)[0], y_train),
            "test_acc": _accuracy(classifier_forward(clf, xv)[0], y_test),
            "loss": float(np.mean(losses)),
        }
        history.append(entry)
        if log:
            log(entry)
    clf.tensors["norm_gamma"] = norm.gamma
    clf.tensors["norm_beta"] = norm.beta
    clf.tensors["norm_running_mean"] = norm.running_mean
    clf.tensors["norm_running_var"] = norm.running_var
    return w, clf, history
