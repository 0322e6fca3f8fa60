"""Glue between stages: model bundles, decoding to physical units, images."""

from __future__ import annotations

import os
import shutil
from pathlib import Path

import numpy as np
import torch

from .data import NormStats, denormalize, normalize
from .training import Checkpoint, LatentCodec

VDIT_DIR, VAE_DIR, VQVAE_DIR = "vdit", "vae", "vqvae"


class MissingStageError(RuntimeError):
    """A required upstream checkpoint is absent."""


def require_checkpoint(path, stage: str, expected: tuple[str, ...]) -> Path:
    if path is None:
        raise MissingStageError(f"missing {stage} checkpoint (run `{stage}` first)")
    path = Path(path)
    meta = path / "meta.txt"
    if not meta.exists():
        raise MissingStageError(f"no {stage} checkpoint at {path} (run `{stage}` first)")
    kind = dict(line.split("=", 1) for line in meta.read_text().splitlines() if line).get("stage")
    if kind not in expected:
        raise MissingStageError(f"{path} holds a {kind!r} checkpoint, expected {stage}")
    return path


def codec_from_extras(vae, vqvae, extras: dict) -> LatentCodec:
    norm = extras["norm"].double().tolist()
    return LatentCodec(
        vae, vqvae, extras["latent_mean"], extras["latent_std"],
        NormStats(norm[0], norm[1], "minmax01"), NormStats(norm[2], norm[3], "minmax_sym"),
    )


def write_bundle(out: str | os.PathLike, vdit: Checkpoint, vae_dir, vqvae_dir, run_config=None) -> None:
    """VDiT checkpoint plus copies of the frozen autoencoders it was trained on."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    vdit.save(out / VDIT_DIR, run_config)
    for src, name in ((vae_dir, VAE_DIR), (vqvae_dir, VQVAE_DIR)):
        dst = out / name
        if Path(src).resolve() != dst.resolve():
            if dst.exists():
                shutil.rmtree(dst)
            shutil.copytree(src, dst)


def load_bundle(path: str | os.PathLike) -> tuple[Checkpoint, LatentCodec]:
    path = Path(path)
    vdit_dir = require_checkpoint(path / VDIT_DIR if (path / VDIT_DIR).exists() else None,
                                  "train-vdit", ("vdit_pretrain", "vdit_finetune"))
    vdit = Checkpoint.load(vdit_dir)
    vae = Checkpoint.load(require_checkpoint(path / VAE_DIR, "train-vae", ("vae",))).model
    vqvae = Checkpoint.load(require_checkpoint(path / VQVAE_DIR, "train-vqvae", ("vqvae",))).model
    vdit.model.eval()
    return vdit, codec_from_extras(vae, vqvae, vdit.extras)


def to_physical(codec: LatentCodec, z: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    sat, dp = codec.decode(z)
    return denormalize(sat, codec.sat_norm), denormalize(dp, codec.dp_norm)


def from_physical(codec: LatentCodec, sat: np.ndarray, dp: np.ndarray) -> torch.Tensor:
    sat_n, _ = normalize(sat, codec.sat_norm)
    dp_n, _ = normalize(dp, codec.dp_norm)
    return codec.encode(sat_n, dp_n)


# -- images -------------------------------------------------------------------


def to_gray(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Physical values -> uint8 via round(255 * clamp(v01, 0, 1)), where v01
    is the value mapped to [0, 1] by the field's normalization range."""
    v01 = (np.asarray(values, dtype=np.float64) - stats.min) / (stats.max - stats.min)
    return np.rint(255.0 * np.clip(v01, 0.0, 1.0)).astype(np.uint8)


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_frames(root: str | os.PathLike, name: str, clip: np.ndarray, stats: NormStats) -> None:
    """One PGM per frame of ``clip`` [F, 1, H, W]."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    gray = to_gray(clip[:, 0], stats)
    for f, img in enumerate(gray):
        write_pgm(root / f"{name}_f{f:02d}.pgm", img)


def error_strip(pred: np.ndarray, truth: np.ndarray, stats: NormStats, gap: int = 2) -> np.ndarray:
    """Rows of prediction / truth / |error| for frames [F, 1, H, W], side by side."""
    p = to_gray(pred[:, 0], stats)
    t = to_gray(truth[:, 0], stats)
    err = np.abs(pred[:, 0].astype(np.float64) - truth[:, 0]) / (stats.max - stats.min)
    e = np.rint(255.0 * np.clip(err, 0.0, 1.0)).astype(np.uint8)
    f, h, w = p.shape
    canvas = np.full((3 * h + 2 * gap, f * w + (f - 1) * gap), 255, dtype=np.uint8)
    for row, imgs in enumerate((p, t, e)):
        for i, img in enumerate(imgs):
            y, x = row * (h + gap), i * (w + gap)
            canvas[y:y + h, x:x + w] = img
    return canvas
