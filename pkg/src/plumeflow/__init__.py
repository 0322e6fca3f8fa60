"""Latent autoregressive video diffusion for coupled saturation / pressure fields."""

from .data import GridSpec, PlumeParams, generate_case, load_tensor, save_tensor, split_dataset
from .diffusion import (
    DiffusionSchedule,
    RolloutPlan,
    autoregressive_rollout,
    build_rollout_plan,
    corrupt,
    rf_loss,
    sample,
)
from .vdit import VDiT, VDiTConfig

__all__ = [
    "DiffusionSchedule",
    "GridSpec",
    "PlumeParams",
    "RolloutPlan",
    "VDiT",
    "VDiTConfig",
    "autoregressive_rollout",
    "build_rollout_plan",
    "corrupt",
    "generate_case",
    "load_tensor",
    "rf_loss",
    "sample",
    "save_tensor",
    "split_dataset",
]
