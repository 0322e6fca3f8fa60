"""Rectified-flow corruption, loss, Euler sampler and sliding-window rollout.

Convention: ``z_t = alpha(t) * z0 + (1 - alpha(t)) * eps`` with
``alpha(t) = 1 - t / T``. The model regresses the constant path velocity
``z0 - eps``, so sampling integrates from noise (t = T) to data (t = 0)
in the interpolation variable ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

Velocity = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 1000
    n_sample_steps: int = 30

    def alpha(self, t):
        return 1.0 - t / self.T

    def grid(self) -> list[float]:
        """Descending timesteps T = t_0 > t_1 > ... > t_n = 0."""
        n = self.n_sample_steps
        return [self.T * (1.0 - k / n) for k in range(n + 1)]

    def check(self, t) -> None:
        t = torch.as_tensor(t)
        if torch.any(t < 0) or torch.any(t > self.T):
            raise ValueError(f"timestep outside [0, {self.T}]")


@dataclass(frozen=True)
class RolloutPlan:
    context: int
    predict: int
    n_steps: int

    def __post_init__(self):
        if self.context < 1 or self.predict < 1 or self.n_steps < 1:
            raise ValueError(f"invalid rollout plan {self}")

    @property
    def window(self) -> int:
        return self.context + self.predict

    @property
    def lengths(self) -> list[int]:
        return [self.context + self.predict * (k + 1) for k in range(self.n_steps)]

    def windows(self) -> list[range]:
        """Frame indices covered by each step's window in the growing clip."""
        return [range(L - self.window, L) for L in self.lengths]


def build_rollout_plan(context: int, predict: int, n_steps: int) -> RolloutPlan:
    return RolloutPlan(context, predict, n_steps)


def _bcast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def corrupt(z0: torch.Tensor, eps: torch.Tensor, t, sched: DiffusionSchedule) -> torch.Tensor:
    """Point on the straight path from ``eps`` (t = T) to ``z0`` (t = 0).

    ``t`` is a scalar or a per-sample tensor [B]. At t = 0 and t = T the
    inputs are selected rather than blended, so the endpoints are bitwise.
    """
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    sched.check(t)
    a = _bcast(sched.alpha(torch.as_tensor(t, dtype=torch.float64)), z0)
    out = a * z0 + (1 - a) * eps
    out = torch.where(a == 1, z0, out)
    return torch.where(a == 0, eps, out)


def rf_loss(v: torch.Tensor, z0: torch.Tensor, eps: torch.Tensor, mask: torch.Tensor | None = None):
    """Mean squared distance between ``v`` and the velocity target ``z0 - eps``.

    With ``mask`` ([B, F], 1 = predicted frame) the mean runs over masked
    frames only.
    """
    if not (v.shape == z0.shape == eps.shape):
        raise ValueError("v, z0, eps must share a shape")
    err = (v - (z0 - eps)).pow(2)
    if mask is None:
        return err.mean()
    m = _frame_mask(mask, v)
    denom = m.expand_as(err).sum()
    if denom == 0:
        raise ValueError("mask selects no frames")
    return (err * m).sum() / denom


def _frame_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=like.dtype)
    if mask.shape != like.shape[:2]:
        raise ValueError(f"mask shape {tuple(mask.shape)} != [B, F] = {tuple(like.shape[:2])}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    return mask[:, :, None, None, None]


def context_mask(batch: int, frames: int, n_context: int) -> torch.Tensor:
    """Mask with the first ``n_context`` frames fixed (0) and the rest predicted (1)."""
    if not 0 <= n_context < frames:
        raise ValueError(f"context length {n_context} leaves no predicted frames out of {frames}")
    m = torch.ones(batch, frames)
    m[:, :n_context] = 0
    return m


def apply_mask(z: torch.Tensor, mask: torch.Tensor, z0: torch.Tensor) -> torch.Tensor:
    """``m * z + (1 - m) * z0`` by selection, so context frames are copied bitwise."""
    m = _frame_mask(mask, z)
    return torch.where(m.expand_as(z) == 1, z, z0)


def masked_train_step_inputs(z0, eps, t, mask, sched: DiffusionSchedule) -> torch.Tensor:
    m = torch.as_tensor(mask)
    if not torch.any(m != 0):
        raise ValueError("all-zero mask: no frames to learn")
    return apply_mask(corrupt(z0, eps, t, sched), m, z0)


@torch.no_grad()
def sample(
    model: Velocity,
    noise: torch.Tensor,
    sched: DiffusionSchedule,
    mask: torch.Tensor | None = None,
    context: torch.Tensor | None = None,
) -> torch.Tensor:
    """Euler-integrate the learned velocity from ``noise`` at t = T to t = 0.

    Each step advances ``alpha`` by ``1 / n_sample_steps``. With ``mask``,
    frames where the mask is 0 are overwritten with ``context`` before the
    first evaluation and after every update.
    """
    if mask is not None and context is None:
        raise ValueError("mask given without context latents")
    if context is not None and context.shape != noise.shape:
        raise ValueError(
            f"context shape {tuple(context.shape)} must match noise shape {tuple(noise.shape)}"
        )
    z = noise.clone()
    if mask is not None:
        z = apply_mask(z, mask, context)
    grid = sched.grid()
    ds = 1.0 / sched.n_sample_steps
    b = z.shape[0]
    for t in grid[:-1]:
        v = model(z, torch.full((b,), t, dtype=torch.float64))
        z = z + ds * v
        if mask is not None:
            z = apply_mask(z, mask, context)
    return z


def gaussian_noise(shape, seed: int, stream: int = 0, dtype=torch.float32) -> torch.Tensor:
    """Standard normal draws from a Philox generator keyed by ``(seed, stream)``."""
    bitgen = np.random.Philox(np.random.SeedSequence([seed, stream]))
    arr = np.random.Generator(bitgen).standard_normal(size=tuple(shape), dtype=np.float32)
    return torch.from_numpy(arr).to(dtype)


@torch.no_grad()
def autoregressive_rollout(
    model: Velocity,
    context: torch.Tensor,
    plan: RolloutPlan,
    sched: DiffusionSchedule,
    noise_seed: int,
    on_window: Callable[[int, range], None] | None = None,
) -> torch.Tensor:
    """Extend ``context`` ([B, F_c, C, H, W]) by ``plan.n_steps`` sliding windows.

    Each window holds the newest ``F_c`` known frames followed by ``F_p``
    Gaussian placeholders; only the placeholders are sampled and appended.
    """
    if context.ndim != 5 or context.shape[1] != plan.context:
        raise ValueError(
            f"context must have {plan.context} frames, got shape {tuple(context.shape)}"
        )
    b, _, c, h, w = context.shape
    clip = context.clone()
    mask = context_mask(b, plan.window, plan.context)
    for step, frames in enumerate(plan.windows()):
        if on_window is not None:
            on_window(step, frames)
        known = clip[:, clip.shape[1] - plan.context:]
        placeholder = torch.zeros(b, plan.predict, c, h, w, dtype=clip.dtype)
        window_ctx = torch.cat([known, placeholder], dim=1)
        noise = gaussian_noise(window_ctx.shape, noise_seed, stream=step, dtype=clip.dtype)
        out = sample(model, noise, sched, mask=mask, context=window_ctx)
        clip = torch.cat([clip, out[:, plan.context:]], dim=1)
    return clip
