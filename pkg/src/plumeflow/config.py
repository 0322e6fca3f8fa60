"""Flat ``key=value`` run configuration.

One entry per line, ``#`` starts a comment. Every key has a typed default
below; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import os
from pathlib import Path

from .autoencoders import ConvStackSpec
from .data import GridSpec
from .diffusion import DiffusionSchedule, RolloutPlan
from .vdit import VDiTConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # data
    "grid.height": 32,
    "grid.width": 64,
    "grid.frames": 17,
    "grid.well_column": 0,
    "data.n_cases": 8,
    "data.rate_min": 3.0,
    "data.rate_max": 11.5,
    "data.amp_min": 0.4,
    "data.amp_max": 2.0,
    # pressure VAE
    "vae.channels": (16, 32, 48, 64),
    "vae.residual_per_block": 1,
    "vae.norm_groups": 16,
    "vae.latent_channels": 4,
    # saturation VQ-VAE
    "vqvae.channels": (16, 32, 48, 64),
    "vqvae.residual_per_block": 1,
    "vqvae.norm_groups": 16,
    "vqvae.latent_channels": 2,
    "vqvae.num_codes": 512,
    # VDiT
    "vdit.hidden_dim": 128,
    "vdit.n_layers": 4,
    "vdit.n_heads": 4,
    "vdit.head_dim": 32,
    "vdit.patch": 2,
    "vdit.t_embed_dim": 64,
    "vdit.max_frames": 32,
    # diffusion
    "diffusion.T": 1000,
    "diffusion.n_sample_steps": 30,
    # rollout
    "rollout.context": 15,
    "rollout.predict": 2,
    "rollout.n_steps": 4,
    # training
    "train.frames": 17,
}

_STAGE_DEFAULTS = {
    "vae": dict(epochs=150, batch_size=1, lr=3e-4, optimizer="adam", weight_decay=0.0, beta=1e-4, grad_clip=0.0),
    "vqvae": dict(epochs=150, batch_size=1, lr=1e-3, optimizer="adam", weight_decay=0.0, beta=0.25, grad_clip=0.0),
    "vdit": dict(epochs=200, batch_size=2, lr=5e-4, optimizer="adamw", weight_decay=0.01, beta=0.0, grad_clip=1.0),
    "ar": dict(epochs=200, batch_size=2, lr=2e-4, optimizer="adamw", weight_decay=0.01, beta=0.0, grad_clip=1.0),
}
for _stage, _vals in _STAGE_DEFAULTS.items():
    for _k, _v in _vals.items():
        DEFAULTS[f"train.{_stage}.{_k}"] = _v
    DEFAULTS[f"train.{_stage}.augment"] = "rows" if _stage in ("vae", "vqvae") else "none"
    DEFAULTS[f"train.{_stage}.beta1"] = 0.9
    DEFAULTS[f"train.{_stage}.beta2"] = 0.999


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig(dict):
    """Resolved configuration: defaults overlaid with user overrides."""

    def __init__(self, overrides: dict | None = None):
        super().__init__(DEFAULTS)
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self[key] = _coerce(key, value) if isinstance(value, str) else value

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> RunConfig:
        if path is None:
            return cls()
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        return "".join(f"{k}={_format(self[k])}\n" for k in sorted(self))

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps())

    def with_overrides(self, **kw) -> RunConfig:
        out = RunConfig(dict(self))
        for key, value in kw.items():
            out.set(key.replace("__", "."), value)
        return out

    # typed views ---------------------------------------------------------

    def grid(self) -> GridSpec:
        return GridSpec(self["grid.height"], self["grid.width"], self["grid.frames"],
                        self["grid.well_column"], 2 ** (len(self["vae.channels"]) - 1))

    def vae_spec(self) -> ConvStackSpec:
        return ConvStackSpec(self["vae.channels"], self["vae.residual_per_block"], self["vae.norm_groups"])

    def vqvae_spec(self) -> ConvStackSpec:
        return ConvStackSpec(self["vqvae.channels"], self["vqvae.residual_per_block"], self["vqvae.norm_groups"])

    def latent_size(self) -> tuple[int, int]:
        f = 2 ** (len(self["vae.channels"]) - 1)
        return self["grid.height"] // f, self["grid.width"] // f

    def vdit_config(self) -> VDiTConfig:
        return VDiTConfig(
            in_channels=self["vqvae.latent_channels"] + self["vae.latent_channels"],
            latent_size=self.latent_size(),
            hidden_dim=self["vdit.hidden_dim"],
            n_layers=self["vdit.n_layers"],
            n_heads=self["vdit.n_heads"],
            head_dim=self["vdit.head_dim"],
            patch=self["vdit.patch"],
            t_embed_dim=self["vdit.t_embed_dim"],
            max_frames=self["vdit.max_frames"],
            horizon=self["diffusion.T"],
        )

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self["diffusion.T"], self["diffusion.n_sample_steps"])

    def plan(self) -> RolloutPlan:
        return RolloutPlan(self["rollout.context"], self["rollout.predict"], self["rollout.n_steps"])

    def train_config(self, stage: str):
        from .training import TrainConfig

        key = {"vdit_pretrain": "vdit", "vdit_finetune": "ar"}.get(stage, stage)
        p = f"train.{key}."
        return TrainConfig(
            stage=stage,
            epochs=self[p + "epochs"],
            batch_size=self[p + "batch_size"],
            lr=self[p + "lr"],
            optimizer=self[p + "optimizer"],
            betas=(self[p + "beta1"], self[p + "beta2"]),
            weight_decay=self[p + "weight_decay"],
            seed=self["seed"],
            grad_clip=self[p + "grad_clip"] or None,
            loss_beta=self[p + "beta"],
            # autoencoders are frame-wise and see every stored frame; only the
            # diffusion stages are limited to the training horizon
            frames=self["grid.frames"] if key in ("vae", "vqvae") else self["train.frames"],
            context=self["rollout.context"],
            augment=self[p + "augment"],
        )
