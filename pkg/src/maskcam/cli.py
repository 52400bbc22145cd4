"""Command-line interface: reproducible end-to-end experiment runs.

    maskcam <subcommand> --config cfg.ini [--seed N] [--out DIR] [--threads N]

Subcommands: simulate-psf, simulate-dataset, train, attack, metrics.
Artifacts for one experiment live under <out>/<name>/{psf/, embeddings/,
checkpoints/, attack/, manifest.txt}.  All randomness flows from one root
seed ([sim] seed, overridable with --seed) split per stage, so re-running a
stage with an equal config reproduces its outputs; metric CSVs come out
byte-identical.  Configs are flat INI files; a [run] preset key fills in
defaults that explicit keys override.  Exit codes: 0 success, 2 invalid
config or arguments, 3 runtime failure.
"""

import argparse
import configparser
import csv
import hashlib
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .attack import attack_report, psnr, ssim
from .datasets import LabeledDataset, load_mnist_idx, take
from .learn import TrainConfig, train
from .optics import (
    SENSOR_EXTENT,
    generate_mls_coded_aperture,
    load_psf,
    rasterize_amplitude,
    save_psf,
    simulate_psf,
    simulate_psf_from_amplitude,
    st7735r_geometry,
)
from .rng import Rng
from .simcam import SceneConfig, simulate_example
from .tensorio import load_tensor, save_tensor, write_png_grayscale, write_png_rgb

GEOMETRIES = ("st7735r", "coded-aperture")
MASK_SOURCES = ("random", "mls")  # or a path to a saved weight tensor
STAGES = ("simulate-psf", "simulate-dataset", "train", "attack")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# Named defaults; explicit config keys always win.  mnist is the desk-scale
# programmable-mask camera (40 cm scene distance, 4 mm mask-to-sensor,
# 12 cm objects, 40 dB shot noise); coded-aperture is the binary MLS mask
# baseline (30 um features at 0.5 mm, full simulation grid).
PRESETS = {
    "mnist": {
        "optics": {
            "d1": "0.4", "d2": "0.004", "grid": "96x128",
            "geometry": "st7735r", "crop_fraction": "0.8", "mask": "random",
            "wavelengths": "640e-9,550e-9,460e-9",
        },
        "sim": {"h_obj": "0.12", "d": "4", "snr": "40", "seed": "0"},
        "train": {
            "epochs": "20", "batch_size": "100", "optimizer": "adam",
            "lr": "1e-3", "encoder_mode": "fixed", "architecture": "LR",
        },
        "attack": {"iters": "500", "resolutions": "24x32,12x16,6x8",
                   "n_images": "10"},
    },
    "coded-aperture": {
        "optics": {
            "d1": "0.4", "d2": "0.0005", "grid": "380x507",
            "geometry": "coded-aperture", "feature_size": "30e-6",
            "mask": "mls", "wavelengths": "640e-9,550e-9,460e-9",
        },
        "sim": {"h_obj": "0.12", "d": "4", "snr": "40", "seed": "0"},
    },
}


class ConfigError(Exception):
    """Invalid configuration or arguments; maps to exit code 2."""


# ------------------------------------------------------------ config loading


def _parse_pair(text, what):
    parts = str(text).lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"{what} must look like ROWSxCOLS, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"{what} must be two integers, got {text!r}") from None


@dataclass
class Experiment:
    """One parsed config bound to its output directory."""

    name: str
    run_dir: Path
    parser: configparser.ConfigParser
    seed: int
    config_hash: str

    def _require(self, section, key):
        if not self.parser.has_option(section, key):
            raise ConfigError(f"missing config key: [{section}] {key}")
        return self.parser.get(section, key)

    def _get(self, section, key, default):
        if not self.parser.has_option(section, key):
            return default
        return self.parser.get(section, key)

    def _float(self, section, key, default=None):
        raw = self._require(section, key) if default is None else \
            self._get(section, key, None)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from None

    def _int(self, section, key, default=None):
        raw = self._require(section, key) if default is None else \
            self._get(section, key, None)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from None

    def optics(self):
        geometry = self._require("optics", "geometry")
        if geometry not in GEOMETRIES:
            raise ConfigError(f"[optics] geometry must be one of {GEOMETRIES}")
        out = {
            "d1": self._float("optics", "d1"),
            "d2": self._float("optics", "d2"),
            "grid": _parse_pair(self._require("optics", "grid"), "[optics] grid"),
            "geometry": geometry,
            "mask": self._get("optics", "mask", "random"),
            "plane_size": SENSOR_EXTENT,
        }
        if out["d1"] <= 0 or out["d2"] <= 0:
            raise ConfigError("[optics] d1 and d2 must be positive")
        raw = self._get("optics", "wavelengths", "640e-9,550e-9,460e-9")
        try:
            out["wavelengths"] = tuple(float(v) for v in raw.split(","))
        except ValueError:
            raise ConfigError(f"[optics] wavelengths must be numbers, got {raw!r}") from None
        plane = self._get("optics", "plane_size", None)
        if plane is not None:
            parts = plane.lower().split("x")
            try:
                out["plane_size"] = (float(parts[0]), float(parts[1]))
            except (ValueError, IndexError):
                raise ConfigError(
                    f"[optics] plane_size must look like HEIGHTxWIDTH, got {plane!r}"
                ) from None
        if geometry == "st7735r":
            out["crop_fraction"] = self._float("optics", "crop_fraction", 0.8)
        else:
            out["feature_size"] = self._float("optics", "feature_size")
        return out

    def scene(self):
        optics = self.optics()
        try:
            return SceneConfig(
                h_obj=self._float("sim", "h_obj"),
                d1=optics["d1"],
                d2=optics["d2"],
                downsample=self._int("sim", "d"),
                target_snr_db=self._float("sim", "snr"),
            )
        except ValueError as exc:
            raise ConfigError(f"[sim] {exc}") from None

    def counts(self):
        return (self._int("sim", "n_train", 0), self._int("sim", "n_test", 0))

    def train_config(self):
        try:
            return TrainConfig(
                epochs=self._int("train", "epochs"),
                batch_size=self._int("train", "batch_size"),
                optimizer=self._require("train", "optimizer"),
                lr=self._float("train", "lr"),
                seed=_stage_seed(self.seed, "train"),
                encoder_mode=self._require("train", "encoder_mode"),
                architecture=self._get("train", "architecture", "LR"),
                lr_decay_epochs=self._int("train", "lr_decay_epochs", 0),
                lr_decay_factor=self._float("train", "lr_decay_factor", 0.1),
                hidden=self._int("train", "hidden", 800),
            )
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from None

    def attack_params(self):
        iters = self._int("attack", "iters", 500)
        n_images = self._int("attack", "n_images", 10)
        if iters < 1 or n_images < 1:
            raise ConfigError("[attack] iters and n_images must be >= 1")
        return {
            "iters": iters,
            "resolutions": self._require("attack", "resolutions"),
            "n_images": n_images,
        }


def _stage_seed(root_seed, stage):
    """Stable per-stage integer seed derived from the root seed."""
    digest = hashlib.sha256(f"{root_seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _config_hash(parser, seed):
    lines = [f"seed={seed}"]
    for section in parser.sections():
        for key, value in parser.items(section):
            lines.append(f"{section}.{key}={value}")
    return hashlib.sha256("\n".join(sorted(lines)).encode()).hexdigest()[:16]


def load_experiment(args) -> Experiment:
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    preset = parser.get("run", "preset", fallback=None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
            )
        for section, values in PRESETS[preset].items():
            if not parser.has_section(section):
                parser.add_section(section)
            for key, value in values.items():
                if not parser.has_option(section, key):
                    parser.set(section, key, value)
    name = parser.get("run", "name", fallback=path.stem)
    if args.seed is not None:
        seed = args.seed
    else:
        try:
            seed = parser.getint("sim", "seed", fallback=0)
        except ValueError:
            raise ConfigError("[sim] seed must be an integer") from None
    return Experiment(
        name=name,
        run_dir=Path(args.out) / name,
        parser=parser,
        seed=seed,
        config_hash=_config_hash(parser, seed),
    )


# -------------------------------------------------------- run-dir management


@contextmanager
def exclusive_lock(run_dir: Path):
    """Exclusive ownership of an experiment directory for one stage."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"{run_dir} is locked by another run (remove {lock} if stale)"
        ) from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _read_manifest(path: Path):
    if not path.exists():
        return {}, {}
    header, stages, current = {}, {}, None
    for line in path.read_text().splitlines():
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            stages[current] = []
        elif current is not None:
            if line.strip():
                stages[current].append(line)
        elif ":" in line:
            key, value = line.split(":", 1)
            header[key.strip()] = value.strip()
    return header, stages


def update_manifest(exp: Experiment, stage, stage_seed, elapsed, artifacts):
    """Atomically record one stage's seed, timing, and artifact list."""
    path = exp.run_dir / "manifest.txt"
    header, stages = _read_manifest(path)
    if header.get("config_hash") != exp.config_hash:
        stages = {}
    stages[stage] = [f"seed: {stage_seed}", f"elapsed_s: {elapsed:.3f}"] + [
        str(a) for a in artifacts
    ]
    lines = [
        f"tool: maskcam {__version__}",
        f"config_hash: {exp.config_hash}",
        f"root_seed: {exp.seed}",
        "",
    ]
    for name in STAGES:
        if name in stages:
            lines.extend([f"[{name}]"] + stages[name] + [""])
    tmp = path.with_name("manifest.txt.tmp")
    tmp.write_text("\n".join(lines))
    os.replace(tmp, path)


def _load_split(root, split):
    root = Path(root)
    images, labels = (root / name for name in MNIST_FILES[split])
    for f in (images, labels):
        if not f.exists():
            raise ConfigError(f"dataset file not found: {f}")
    return load_mnist_idx(images, labels, split)


# ---------------------------------------------------------------- subcommands


def _psf_weights(exp, optics, geometry):
    source = optics["mask"]
    if source == "random":
        rng = Rng(exp.seed).split("simulate-psf").split("mask-init")
        return rng.uniform((geometry.num_subpixels,))
    if source == "mls":
        raise ConfigError(
            "[optics] mask=mls requires geometry=coded-aperture"
        )
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"[optics] mask tensor not found: {path}")
    weights = load_tensor(path).ravel()
    if weights.size != geometry.num_subpixels:
        raise ConfigError(
            f"[optics] mask tensor has {weights.size} weights, "
            f"geometry needs {geometry.num_subpixels}"
        )
    return weights


def cmd_simulate_psf(args):
    exp = load_experiment(args)
    optics = exp.optics()
    start = time.perf_counter()
    if optics["geometry"] == "coded-aperture":
        if optics["mask"] == "mls":
            weights = generate_mls_coded_aperture()
        elif optics["mask"] == "random":
            raise ConfigError("[optics] geometry=coded-aperture needs mask=mls "
                              "or a saved mask tensor path")
        else:
            mask_path = Path(optics["mask"])
            if not mask_path.exists():
                raise ConfigError(f"[optics] mask tensor not found: {mask_path}")
            weights = load_tensor(mask_path)
        try:
            amplitude = rasterize_amplitude(
                weights, (optics["feature_size"],) * 2,
                optics["grid"], optics["plane_size"],
            )
        except ValueError as exc:
            raise ConfigError(f"[optics] {exc}") from None
        psf = simulate_psf_from_amplitude(
            amplitude, optics["d1"], optics["d2"],
            wavelengths=optics["wavelengths"], plane_size=optics["plane_size"],
        )
    else:
        geometry = st7735r_geometry(optics["crop_fraction"])
        weights = _psf_weights(exp, optics, geometry)
        psf = simulate_psf(
            geometry, weights, optics["d1"], optics["d2"],
            wavelengths=optics["wavelengths"], grid=optics["grid"],
            plane_size=optics["plane_size"],
        )
    with exclusive_lock(exp.run_dir):
        psf_dir = exp.run_dir / "psf"
        psf_dir.mkdir(exist_ok=True)
        save_psf(psf, psf_dir / "psf")
        save_tensor(np.asarray(weights, dtype=np.float64),
                    psf_dir / "weights.ltns")
        scaled = psf.values / max(float(psf.values.max()), 1e-30)
        if psf.values.shape[0] == 3:
            write_png_rgb(scaled, psf_dir / "psf.png")
        else:
            write_png_grayscale(scaled[0], psf_dir / "psf.png")
        artifacts = ["psf/psf.ltns", "psf/psf.meta", "psf/psf.png",
                     "psf/weights.ltns"]
        update_manifest(exp, "simulate-psf", _stage_seed(exp.seed, "simulate-psf"),
                        time.perf_counter() - start, artifacts)
    shape = "x".join(str(s) for s in psf.values.shape)
    print(f"psf: {psf_dir / 'psf.ltns'} ({shape})")
    return 0


def cmd_simulate_dataset(args):
    exp = load_experiment(args)
    scene = exp.scene()
    n_train, n_test = exp.counts()
    psf_stem = exp.run_dir / "psf" / "psf"
    if not psf_stem.with_suffix(".ltns").exists():
        raise ConfigError(f"missing PSF {psf_stem}.ltns; run simulate-psf first")
    splits = {"train": n_train, "test": n_test}
    datasets = {name: _load_split(args.dataset, name) for name in splits}
    start = time.perf_counter()
    with exclusive_lock(exp.run_dir):
        psf = load_psf(psf_stem)
        stage = Rng(exp.seed).split("simulate-dataset")
        artifacts = []
        for split, count in splits.items():
            ds = take(datasets[split], count) if count else datasets[split]
            out_dir = exp.run_dir / "embeddings" / split
            out_dir.mkdir(parents=True, exist_ok=True)
            lines = []
            for i in range(len(ds)):
                child = stage.split(f"noise-{split}-{i}")
                emb = simulate_example(ds.images[i, 0], scene, psf, child)
                filename = f"item_{i:05d}.ltns"
                save_tensor(emb.values[0], out_dir / filename)
                lines.append(f"{i} {int(ds.labels[i])} {filename} {child.stream}")
            (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
            artifacts.append(f"embeddings/{split}/manifest.txt ({len(ds)} items)")
            print(f"embeddings: {out_dir} ({len(ds)} items)")
        update_manifest(exp, "simulate-dataset",
                        _stage_seed(exp.seed, "simulate-dataset"),
                        time.perf_counter() - start, artifacts)
    return 0


def _load_embeddings(run_dir, split):
    out_dir = run_dir / "embeddings" / split
    manifest = out_dir / "manifest.txt"
    if not manifest.exists():
        raise ConfigError(
            f"missing embeddings manifest {manifest}; run simulate-dataset first"
        )
    labels, tensors = [], []
    for line in manifest.read_text().splitlines():
        _, label, filename, _ = line.split()
        labels.append(int(label))
        tensors.append(load_tensor(out_dir / filename))
    return LabeledDataset(
        images=np.stack(tensors)[:, None],
        labels=np.asarray(labels, dtype=np.int64),
        split=split,
    )


def cmd_train(args):
    exp = load_experiment(args)
    config = exp.train_config()
    if config.encoder_mode == "fixed":
        dataset = {s: _load_embeddings(exp.run_dir, s) for s in ("train", "test")}
        extra = {}
    else:
        optics = exp.optics()
        if optics["geometry"] != "st7735r":
            raise ConfigError(
                "learned-mask training needs the programmable-mask geometry "
                "([optics] geometry=st7735r)"
            )
        if not args.dataset:
            raise ConfigError("--dataset is required for learned-mask training")
        scene = exp.scene()
        n_train, n_test = exp.counts()
        dataset = {}
        for split, count in (("train", n_train), ("test", n_test)):
            ds = _load_split(args.dataset, split)
            dataset[split] = take(ds, count) if count else ds
        extra = {
            "geometry": st7735r_geometry(optics["crop_fraction"]),
            "scene": scene,
            "grid": optics["grid"],
            "plane_size": optics["plane_size"],
            "wavelengths": optics["wavelengths"],
        }
    start = time.perf_counter()
    with exclusive_lock(exp.run_dir):
        ckpt_dir = exp.run_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)

        def log(entry):
            print("epoch {epoch}: train_acc={train_acc:.4f} "
                  "test_acc={test_acc:.4f} loss={loss:.6f}".format(**entry))

        weights, clf, history = train(config, dataset, log=log, **extra)

        artifacts = ["checkpoints/metrics.csv", "checkpoints/manifest.txt"]
        with open(ckpt_dir / "metrics.csv", "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["epoch", "train_acc", "test_acc", "loss"]
            )
            writer.writeheader()
            writer.writerows(history)
        for name, tensor in clf.tensors.items():
            save_tensor(np.asarray(tensor, dtype=np.float64),
                        ckpt_dir / f"clf_{name}.ltns")
            artifacts.append(f"checkpoints/clf_{name}.ltns")
        if weights is not None:
            save_tensor(weights, ckpt_dir / "mask.ltns")
            artifacts.append("checkpoints/mask.ltns")
        final = history[-1]
        (ckpt_dir / "manifest.txt").write_text(
            "\n".join([
                f"architecture: {clf.architecture}",
                f"config_hash: {exp.config_hash}",
                f"epoch: {final['epoch']}",
                f"train_acc: {final['train_acc']!r}",
                f"test_acc: {final['test_acc']!r}",
                f"loss: {final['loss']!r}",
            ]) + "\n"
        )
        update_manifest(exp, "train", config.seed,
                        time.perf_counter() - start, artifacts)
    print(f"final test_acc={final['test_acc']:.4f}")
    return 0


def _parse_factors(raw, grid):
    factors = []
    for token in str(raw).split(","):
        token = token.strip()
        if not token:
            continue
        if "x" in token:
            res = _parse_pair(token, "[attack] resolutions entry")
            if res[0] < 1 or res[1] < 1 or grid[0] % res[0] or grid[1] % res[1] \
                    or grid[0] // res[0] != grid[1] // res[1]:
                raise ConfigError(
                    f"resolution {token} does not evenly divide the "
                    f"{grid[0]}x{grid[1]} grid"
                )
            factors.append(grid[0] // res[0])
        else:
            try:
                factors.append(int(token))
            except ValueError:
                raise ConfigError(
                    f"[attack] resolutions entry {token!r} must be an integer "
                    "factor or ROWSxCOLS"
                ) from None
    if not factors:
        raise ConfigError("[attack] resolutions is empty")
    return factors


def cmd_attack(args):
    exp = load_experiment(args)
    optics = exp.optics()
    scene = exp.scene()
    params = exp.attack_params()
    if args.iters is not None:
        if args.iters < 1:
            raise ConfigError("--iters must be >= 1")
        params["iters"] = args.iters
    if args.resolutions is not None:
        params["resolutions"] = args.resolutions
    if optics["geometry"] != "st7735r":
        raise ConfigError(
            "the decoy-mask attack needs the programmable-mask geometry "
            "([optics] geometry=st7735r)"
        )
    geometry = st7735r_geometry(optics["crop_fraction"])
    psf_stem = Path(args.psf).with_suffix("") if args.psf \
        else exp.run_dir / "psf" / "psf"
    if not psf_stem.with_suffix(".ltns").exists():
        raise ConfigError(f"missing PSF {psf_stem}.ltns; run simulate-psf first")
    test = _load_split(args.dataset, "test")
    images = test.images[: params["n_images"], 0]
    start = time.perf_counter()
    with exclusive_lock(exp.run_dir):
        psf = load_psf(psf_stem)
        factors = _parse_factors(params["resolutions"], psf.values.shape[1:])
        decoy_weights = None
        if args.decoy_seed is not None:
            decoy_weights = Rng(args.decoy_seed).split("decoy").uniform(
                (geometry.num_subpixels,)
            )
        out_dir = exp.run_dir / "attack"
        rows = attack_report(
            images, None, geometry, scene, factors, out_dir,
            iters=params["iters"], wavelengths=optics["wavelengths"],
            seed=_stage_seed(exp.seed, "attack"), psf=psf,
            decoy_weights=decoy_weights,
            log=lambda row: print(
                "{resolution} {psf_kind}: psnr={psnr_mean:.2f} "
                "ssim={ssim_mean:.4f} n={n_images}".format(**row)
            ),
        )
        artifacts = ["attack/attack.csv"] + sorted(
            f"attack/{p.name}" for p in out_dir.glob("*.png")
        )
        update_manifest(exp, "attack", _stage_seed(exp.seed, "attack"),
                        time.perf_counter() - start, artifacts)
    print(f"attack report: {out_dir / 'attack.csv'} ({len(rows)} rows)")
    return 0


def _load_image_file(path: Path):
    if path.suffix == ".ltns":
        tensor = np.squeeze(load_tensor(path))
        if tensor.ndim == 3:
            tensor = tensor.mean(axis=0)
        if tensor.ndim != 2:
            raise ValueError(f"{path}: expected an image tensor, got {tensor.shape}")
        return tensor
    from PIL import Image

    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def cmd_metrics(args):
    a_dir, b_dir = Path(args.a_dir), Path(args.b_dir)
    for d in (a_dir, b_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    names = sorted(
        {p.name for p in a_dir.iterdir() if p.suffix in (".ltns", ".png")}
        & {p.name for p in b_dir.iterdir()}
    )
    if not names:
        raise ConfigError(f"no common .ltns/.png files between {a_dir} and {b_dir}")
    rows = []
    for name in names:
        a = _load_image_file(a_dir / name)
        b = _load_image_file(b_dir / name)
        rows.append({"file": name, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    rows.append({
        "file": "mean",
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
    })
    lines = ["file,psnr,ssim"] + [
        f"{r['file']},{r['psnr']!r},{r['ssim']!r}" for r in rows
    ]
    text = "\n".join(lines) + "\n"
    if args.csv:
        Path(args.csv).write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- entrypoint


def _apply_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, default=None,
                        help="root seed (overrides [sim] seed)")
    common.add_argument("--out", default="out",
                        help="parent of experiment directories (default: out)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker thread cap for numeric backends")
    parser = argparse.ArgumentParser(
        prog="maskcam",
        description="Digital twin of a programmable-mask lensless camera.",
    )
    parser.add_argument("--version", action="version",
                        version=f"maskcam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-psf", parents=[common],
                       help="simulate and save the mask PSF")
    p.set_defaults(func=cmd_simulate_psf)

    p = sub.add_parser("simulate-dataset", parents=[common],
                       help="simulate sensor embeddings for a dataset")
    p.add_argument("--dataset", required=True, help="MNIST IDX directory")
    p.set_defaults(func=cmd_simulate_dataset)

    p = sub.add_parser("train", parents=[common],
                       help="train a classifier (optionally jointly with the mask)")
    p.add_argument("--dataset", help="MNIST IDX directory (learned mode)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common],
                       help="good-vs-decoy PGD recovery report")
    p.add_argument("--dataset", required=True, help="MNIST IDX directory")
    p.add_argument("--psf", help="PSF file (default: this experiment's)")
    p.add_argument("--decoy-seed", type=int, default=None,
                   help="seed for the decoy mask draw")
    p.add_argument("--resolutions", help="override [attack] resolutions")
    p.add_argument("--iters", type=int, default=None,
                   help="override [attack] iters")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("metrics", parents=[common],
                       help="pairwise PSNR/SSIM between two image directories")
    p.add_argument("a_dir")
    p.add_argument("b_dir")
    p.add_argument("--csv", help="also write the table to this file")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        _apply_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 — map any failure to exit 3
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
