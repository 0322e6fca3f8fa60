"""Stage I-III training loops, latent encoding and checkpoint I/O.

All randomness inside a run (shuffling, VAE noise, diffusion times and
noise) is drawn from one ``torch.Generator`` whose state is checkpointed,
so a resumed run replays the uninterrupted one exactly.
"""

from __future__ import annotations

import copy
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .autoencoders import (
    ConvStackSpec,
    PressureVAE,
    SaturationVQVAE,
    straight_through,
    vae_loss,
    vqvae_loss,
)
from .data import NormStats
from .diffusion import (
    DiffusionSchedule,
    context_mask,
    corrupt,
    masked_train_step_inputs,
    rf_loss,
)
from .vdit import VDiT, VDiTConfig

log = logging.getLogger(__name__)

STAGES = ("vae", "vqvae", "vdit_pretrain", "vdit_finetune")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 50
    batch_size: int = 2
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    grad_clip: float | None = None
    precision: str = "fp32"
    loss_beta: float = 0.0
    frames: int = 17
    context: int = 15
    augment: str = "none"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.augment not in ("none", "rows"):
            raise ValueError(f"unknown augmentation {self.augment!r}")
        if self.precision != "fp32":
            raise ValueError("only fp32 training is supported")
        if self.stage == "vdit_finetune" and not 0 < self.context < self.frames:
            raise ValueError(
                f"context prefix {self.context} must leave predicted frames in a {self.frames}-frame clip"
            )


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    components: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self) -> str:
        """CSV of epoch, loss and components. Wall time is left out so
        reruns produce identical files."""
        keys = sorted({k for r in self.records for k in r.components})
        lines = [",".join(["epoch", "loss", *keys])]
        for r in self.records:
            lines.append(",".join([str(r.epoch), repr(r.loss), *(repr(r.components[k]) for k in keys)]))
        return "\n".join(lines) + "\n"


# -- model construction ------------------------------------------------------


def build_vae(spec: ConvStackSpec, latent_channels: int, seed: int) -> PressureVAE:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return PressureVAE(spec, latent_channels)


def build_vqvae(spec: ConvStackSpec, latent_channels: int, num_codes: int, seed: int) -> SaturationVQVAE:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return SaturationVQVAE(spec, latent_channels, num_codes)


def build_vdit(config: VDiTConfig, seed: int) -> VDiT:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return VDiT(config)


def model_meta(model: nn.Module) -> dict[str, str]:
    if isinstance(model, VDiT):
        meta = {f"vdit.{k}": v for k, v in asdict(model.config).items()}
        meta["model"] = "vdit"
    elif isinstance(model, (PressureVAE, SaturationVQVAE)):
        s = model.spec
        meta = {
            "model": "vae" if isinstance(model, PressureVAE) else "vqvae",
            "channels": ",".join(map(str, s.channels)),
            "residual_per_block": s.residual_per_block,
            "norm_groups": s.norm_groups,
            "latent_channels": model.latent_channels,
        }
        if isinstance(model, SaturationVQVAE):
            meta["num_codes"] = model.codebook.num_codes
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    return {k: (",".join(map(str, v)) if isinstance(v, tuple) else str(v)) for k, v in meta.items()}


def model_from_meta(meta: dict[str, str]) -> nn.Module:
    kind = meta["model"]
    if kind == "vdit":
        kw = {}
        for f_name, f_def in VDiTConfig.__dataclass_fields__.items():
            raw = meta[f"vdit.{f_name}"]
            if f_name == "latent_size":
                kw[f_name] = tuple(int(x) for x in raw.split(","))
            elif f_def.type in ("float",):
                kw[f_name] = float(raw)
            else:
                kw[f_name] = int(raw)
        return VDiT(VDiTConfig(**kw))
    spec = ConvStackSpec(
        tuple(int(x) for x in meta["channels"].split(",")),
        int(meta["residual_per_block"]),
        int(meta["norm_groups"]),
    )
    if kind == "vae":
        return PressureVAE(spec, int(meta["latent_channels"]))
    if kind == "vqvae":
        return SaturationVQVAE(spec, int(meta["latent_channels"]), int(meta["num_codes"]))
    raise ValueError(f"unknown model kind {kind!r}")


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    return cls(model.parameters(), lr=config.lr, betas=config.betas, eps=1e-8,
               weight_decay=config.weight_decay)


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    model: nn.Module
    config: TrainConfig
    optimizer: torch.optim.Optimizer | None = None
    generator: torch.Generator | None = None
    extras: dict[str, torch.Tensor] = field(default_factory=dict)

    def param_names(self) -> list[str]:
        return [n for n, _ in self.model.named_parameters()]

    def save(self, path: str | os.PathLike, run_config=None) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        tensors = ckpt.module_state(self.model)
        if self.optimizer is not None:
            tensors.update(ckpt.optimizer_state(self.optimizer, self.param_names()))
        if self.generator is not None:
            tensors["rng"] = ckpt.rng_to_tensor(self.generator)
        for k, v in self.extras.items():
            tensors[f"extra/{k}"] = v
        ckpt.save_tensors(path, tensors)
        meta = {"stage": self.stage, "epoch": self.epoch, **model_meta(self.model)}
        for k, v in asdict(self.config).items():
            meta[f"train.{k}"] = ",".join(map(str, v)) if isinstance(v, tuple) else v
        ckpt.write_meta(path, meta)
        if run_config is not None:
            run_config.write(path / "config.txt")

    @classmethod
    def load(cls, path: str | os.PathLike) -> Checkpoint:
        path = Path(path)
        meta = ckpt.read_meta(path)
        tensors = ckpt.load_tensors(path)
        model = model_from_meta(meta)
        ckpt.load_module_state(model, tensors)
        config = _config_from_meta(meta)
        opt = None
        if any(k.startswith("optim/") for k in tensors):
            opt = make_optimizer(model, config)
            ckpt.load_optimizer_state(opt, [n for n, _ in model.named_parameters()], tensors)
        gen = None
        if "rng" in tensors:
            gen = torch.Generator()
            ckpt.rng_from_tensor(gen, tensors["rng"])
        extras = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
        return cls(meta["stage"], int(meta["epoch"]), model, config, opt, gen, extras)


def _config_from_meta(meta: dict[str, str]) -> TrainConfig:
    kw = {}
    for name, f in TrainConfig.__dataclass_fields__.items():
        raw = meta.get(f"train.{name}")
        if raw is None:
            continue
        if name == "betas":
            kw[name] = tuple(float(x) for x in raw.split(","))
        elif name == "grad_clip":
            kw[name] = None if raw == "None" else float(raw)
        elif name in ("stage", "optimizer", "precision", "augment"):
            kw[name] = raw
        elif name in ("lr", "weight_decay", "loss_beta"):
            kw[name] = float(raw)
        else:
            kw[name] = int(raw)
    return TrainConfig(**kw)


# -- training loop -------------------------------------------------------------


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _fit(state: Checkpoint, n_items: int, step_fn, train_log: TrainLog | None = None):
    """Run epochs ``state.epoch + 1 .. config.epochs``; ``step_fn(idx)``
    returns (loss tensor, components dict) for one minibatch."""
    cfg = state.config
    train_log = train_log or TrainLog()
    model, opt, gen = state.model, state.optimizer, state.generator
    model.train()
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        total, n_batches = 0.0, 0
        for b, idx in enumerate(_batches(n_items, cfg.batch_size, gen)):
            loss, parts = step_fn(idx)
            if not torch.isfinite(loss):
                raise TrainingError(f"{cfg.stage}: non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += float(loss.detach())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        rec = EpochRecord(
            epoch, total / n_batches, {k: v / n_batches for k, v in sums.items()},
            time.perf_counter() - t0,
        )
        train_log.records.append(rec)
        state.epoch = epoch
        log.debug("%s epoch %d loss %.6g", cfg.stage, epoch, rec.loss)
    model.eval()
    return state, train_log


def _new_state(model: nn.Module, config: TrainConfig) -> Checkpoint:
    gen = torch.Generator()
    gen.manual_seed(config.seed)
    return Checkpoint(config.stage, 0, model, config, make_optimizer(model, config), gen)


def shuffle_rows(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Independently permute the rows (axis -2) of every image in ``x`` [N, C, H, W]."""
    n, _, h, _ = x.shape
    order = torch.argsort(torch.rand(n, h, generator=gen), dim=1)
    return torch.gather(x, 2, order[:, None, :, None].expand_as(x))


def train_autoencoder(
    config: TrainConfig,
    frames: np.ndarray,
    model: nn.Module | None = None,
    resume: Checkpoint | None = None,
    train_log: TrainLog | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Stage I: fit the VAE (pressure) or VQ-VAE (saturation) on independent frames.

    ``frames`` holds normalized clips [N, F, 1, H, W]; only the first
    ``config.frames`` frames of each clip are used. With ``augment="rows"``
    every frame gets its own random row order; the synthetic generator draws
    rows independently, so a shuffled frame is another valid sample.
    """
    if config.stage not in ("vae", "vqvae"):
        raise ValueError(f"train_autoencoder got stage {config.stage!r}")
    data = torch.as_tensor(np.asarray(frames)[:, : config.frames], dtype=torch.float32)
    n, f = data.shape[:2]
    if resume is not None:
        state = resume
        state.config = config
    else:
        if model is None:
            raise ValueError("model or resume checkpoint required")
        state = _new_state(model, config)
    beta = config.loss_beta
    gen = state.generator

    def step(idx):
        x = data[idx].reshape(len(idx) * f, *data.shape[2:])
        if config.augment == "rows":
            x = shuffle_rows(x, gen)
        if config.stage == "vae":
            lat = state.model.encode(x)
            noise = torch.randn(lat.mu.shape, generator=gen)
            rep = vae_loss(x, state.model.decode(state.model.sample(lat, noise)), lat, beta)
        else:
            q = state.model.quantize(state.model.encode(x))
            rep = vqvae_loss(x, state.model.decode(straight_through(q)), q, beta)
        return rep.total, rep.components()

    return _fit(state, n, step, train_log)


def train_vdit(
    config: TrainConfig,
    latents: torch.Tensor,
    schedule: DiffusionSchedule,
    model: VDiT | None = None,
    init: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    train_log: TrainLog | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Stage II (``vdit_pretrain``) or Stage III (``vdit_finetune``).

    Fine-tuning starts from ``init`` (a pre-trained checkpoint) with a fresh
    optimizer, keeps the first ``config.context`` frames clean and averages
    the loss over the remaining frames only.
    """
    ar = config.stage == "vdit_finetune"
    if config.stage not in ("vdit_pretrain", "vdit_finetune"):
        raise ValueError(f"train_vdit got stage {config.stage!r}")
    data = torch.as_tensor(latents, dtype=torch.float32)[:, : config.frames]
    n, f = data.shape[:2]
    if resume is not None:
        state = resume
        state.config = config
    elif ar:
        if init is None:
            raise TrainingError("autoregressive fine-tuning requires a pre-trained VDiT checkpoint")
        state = _new_state(copy.deepcopy(init.model), config)
    else:
        if model is None:
            raise ValueError("model, init or resume checkpoint required")
        state = _new_state(model, config)
    gen = state.generator

    def step(idx):
        z0 = data[idx]
        b = z0.shape[0]
        t = torch.rand(b, generator=gen, dtype=torch.float64) * schedule.T
        eps = torch.randn(z0.shape, generator=gen)
        if ar:
            mask = context_mask(b, f, config.context)
            z_t = masked_train_step_inputs(z0, eps, t, mask, schedule)
            loss = rf_loss(state.model(z_t, t), z0, eps, mask)
        else:
            loss = rf_loss(state.model(corrupt(z0, eps, t, schedule), t), z0, eps)
        return loss, {"rf": float(loss.detach())}

    return _fit(state, n, step, train_log)


# -- latent encoding -----------------------------------------------------------


@torch.no_grad()
def encode_dataset(
    vae: PressureVAE, vqvae: SaturationVQVAE, sat: np.ndarray, dp: np.ndarray, batch: int = 64
) -> torch.Tensor:
    """Joint latents [N, F, C_gas + C_p, H', W'] from normalized clips.

    The saturation path contributes quantized codes, the pressure path the
    posterior mean.
    """
    sat = torch.as_tensor(np.asarray(sat), dtype=torch.float32)
    dp = torch.as_tensor(np.asarray(dp), dtype=torch.float32)
    if sat.shape != dp.shape:
        raise ValueError(f"saturation {tuple(sat.shape)} and pressure {tuple(dp.shape)} differ")
    if vae.factor != vqvae.factor:
        raise ValueError("autoencoders disagree on the downsample factor")
    n, f = sat.shape[:2]
    xs, xp = sat.reshape(n * f, *sat.shape[2:]), dp.reshape(n * f, *dp.shape[2:])
    vae.eval()
    vqvae.eval()
    out = []
    for s in range(0, n * f, batch):
        zq = vqvae.quantize(vqvae.encode(xs[s:s + batch])).z_q
        mu = vae.encode(xp[s:s + batch]).mu
        out.append(torch.cat([zq, mu], dim=1))
    z = torch.cat(out)
    return z.reshape(n, f, *z.shape[1:])


class LatentCodec:
    """Frozen autoencoder pair plus per-channel latent standardization.

    The diffusion model sees ``(z - mean) / std`` with statistics taken
    over the training latents.
    """

    def __init__(self, vae: PressureVAE, vqvae: SaturationVQVAE,
                 mean: torch.Tensor, std: torch.Tensor,
                 sat_norm: NormStats | None = None, dp_norm: NormStats | None = None):
        self.vae, self.vqvae = vae.eval(), vqvae.eval()
        self.mean = mean.reshape(-1).float()
        self.std = std.reshape(-1).float()
        self.sat_norm, self.dp_norm = sat_norm, dp_norm

    @classmethod
    def fit(cls, vae, vqvae, sat, dp, **norms) -> tuple[LatentCodec, torch.Tensor]:
        raw = encode_dataset(vae, vqvae, sat, dp)
        mean = raw.mean(dim=(0, 1, 3, 4))
        std = raw.std(dim=(0, 1, 3, 4)).clamp_min(1e-6)
        codec = cls(vae, vqvae, mean, std, **norms)
        return codec, codec.standardize(raw)

    @property
    def gas_channels(self) -> int:
        return self.vqvae.latent_channels

    def _bc(self, v):
        return v[None, None, :, None, None]

    def standardize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self._bc(self.mean)) / self._bc(self.std)

    def unstandardize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self._bc(self.std) + self._bc(self.mean)

    def encode(self, sat, dp) -> torch.Tensor:
        return self.standardize(encode_dataset(self.vae, self.vqvae, sat, dp))

    @torch.no_grad()
    def decode(self, z: torch.Tensor, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Normalized (saturation, pressure) clips; saturation clamped to
        [0, 1], pressure to [-1, 1]. Gas latents are snapped to the codebook."""
        raw = self.unstandardize(z)
        n, f = raw.shape[:2]
        flat = raw.reshape(n * f, *raw.shape[2:])
        sats, dps = [], []
        for s in range(0, n * f, batch):
            part = flat[s:s + batch]
            gas, pres = part[:, : self.gas_channels], part[:, self.gas_channels:]
            sats.append(self.vqvae.decode(self.vqvae.quantize(gas).z_q).clamp(0.0, 1.0))
            dps.append(self.vae.decode(pres).clamp(-1.0, 1.0))
        sat = torch.cat(sats).reshape(n, f, *sats[0].shape[1:])
        dp = torch.cat(dps).reshape(n, f, *dps[0].shape[1:])
        return sat.numpy(), dp.numpy()

    def extras(self) -> dict[str, torch.Tensor]:
        out = {"latent_mean": self.mean, "latent_std": self.std}
        if self.sat_norm is not None:
            out["norm"] = torch.tensor(
                [self.sat_norm.min, self.sat_norm.max, self.dp_norm.min, self.dp_norm.max],
                dtype=torch.float32,
            )
        return out


def stage_loss_drop(train_log: TrainLog) -> float:
    """Final-epoch loss divided by first-epoch loss."""
    return train_log.records[-1].loss / train_log.records[0].loss if train_log.records else math.nan
