"""Latent video diffusion transformer with factorized attention.

Layers alternate between spatial attention (tokens of one frame) and
temporal attention (one token position across frames). Every block is
conditioned on the diffusion timestep through AdaLN-Zero modulation, so a
freshly initialized network is the identity on its token stream and the
zero-initialized head makes the predicted velocity exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class VDiTConfig:
    in_channels: int = 6
    latent_size: tuple[int, int] = (4, 8)
    hidden_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    patch: int = 2
    t_embed_dim: int = 64
    max_frames: int = 32
    mlp_ratio: float = 4.0
    horizon: int = 1000

    def __post_init__(self):
        if self.hidden_dim != self.n_heads * self.head_dim:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} != n_heads*head_dim {self.n_heads * self.head_dim}"
            )
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        if self.n_layers < 2 or self.n_layers % 2:
            raise ValueError(f"n_layers must be even and >= 2, got {self.n_layers}")

    @property
    def grid(self) -> tuple[int, int]:
        p = self.patch
        h, w = self.latent_size
        return -(-h // p), -(-w // p)

    @property
    def tokens_per_frame(self) -> int:
        gh, gw = self.grid
        return gh * gw


DESK_CONFIG = VDiTConfig()
FULL_SCALE_CONFIG = VDiTConfig(
    in_channels=26, latent_size=(12, 25), hidden_dim=512, n_layers=8,
    n_heads=8, head_dim=64, patch=2, t_embed_dim=256,
)


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # [B, F, N_t, D]
    pad_h: int
    pad_w: int
    orig: tuple[int, int]


def patchify(z: torch.Tensor, p: int) -> TokenGrid:
    """Split each frame of ``z`` [B, F, C, H, W] into p x p patches.

    Frames are zero-padded on the bottom/right to multiples of ``p``. Token
    features are the flattened (C, p, p) patch values.
    """
    b, f, c, h, w = z.shape
    pad_h, pad_w = (-h) % p, (-w) % p
    x = F.pad(z, (0, pad_w, 0, pad_h)) if pad_h or pad_w else z
    gh, gw = (h + pad_h) // p, (w + pad_w) // p
    x = x.reshape(b, f, c, gh, p, gw, p).permute(0, 1, 3, 5, 2, 4, 6)
    return TokenGrid(x.reshape(b, f, gh * gw, c * p * p), pad_h, pad_w, (h, w))


def unpatchify(grid: TokenGrid, p: int) -> torch.Tensor:
    b, f, n, d = grid.tokens.shape
    c = d // (p * p)
    h, w = grid.orig
    gh, gw = (h + grid.pad_h) // p, (w + grid.pad_w) // p
    if gh * gw != n:
        raise ValueError(f"{n} tokens do not tile a {gh}x{gw} patch grid")
    x = grid.tokens.reshape(b, f, gh, gw, c, p, p).permute(0, 1, 4, 2, 5, 3, 6)
    x = x.reshape(b, f, c, gh * p, gw * p)
    return x[..., :h, :w]


def sinusoidal_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """[cos | sin] features of ``t`` (shape [B]) at geometric frequencies."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden_dim: int, freq_dim: int, horizon: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.horizon = horizon
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, hidden_dim), nn.SiLU(), nn.Linear(hidden_dim, hidden_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any(t < 0) or torch.any(t > self.horizon):
            raise ValueError(f"timestep outside [0, {self.horizon}]")
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_features(t, self.freq_dim).to(w.dtype))


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        # x: [S, L, D] -- attention over L for each of S sequences
        s, l, d = x.shape
        q, k, v = self.qkv(x).reshape(s, l, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(s, l, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class VDiTBlock(nn.Module):
    """Pre-norm attention + MLP with AdaLN-Zero; ``axis`` selects what attends."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float, axis: str):
        super().__init__()
        if axis not in ("spatial", "temporal"):
            raise ValueError(axis)
        self.axis = axis
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def adaln(self, cond: torch.Tensor):
        """(shift, scale, gate) for the attention and MLP sites, each [B, D]."""
        return self.ada(cond).chunk(6, dim=-1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, f, n, d = x.shape
        if cond.shape != (b, d):
            raise ValueError(f"cond shape {tuple(cond.shape)} != {(b, d)}")
        sh1, sc1, g1, sh2, sc2, g2 = (m[:, None, None, :] for m in self.adaln(cond))
        h = modulate(self.norm1(x), sh1, sc1)
        if self.axis == "spatial":
            a = self.attn(h.reshape(b * f, n, d)).reshape(b, f, n, d)
        else:
            a = self.attn(h.transpose(1, 2).reshape(b * n, f, d)).reshape(b, n, f, d).transpose(1, 2)
        x = x + g1 * a
        x = x + g2 * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_features: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_features)
        for lin in (self.ada[1], self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, cond):
        shift, scale = (m[:, None, None, :] for m in self.ada(cond).chunk(2, dim=-1))
        return self.linear(modulate(self.norm(x), shift, scale))


class VDiT(nn.Module):
    def __init__(self, config: VDiTConfig = DESK_CONFIG):
        super().__init__()
        self.config = cfg = config
        p, c, d = cfg.patch, cfg.in_channels, cfg.hidden_dim
        self.patch_embed = nn.Linear(c * p * p, d)
        self.pos_spatial = nn.Parameter(torch.zeros(cfg.tokens_per_frame, d))
        self.pos_temporal = nn.Parameter(torch.zeros(cfg.max_frames, d))
        nn.init.normal_(self.pos_spatial, std=0.02)
        nn.init.normal_(self.pos_temporal, std=0.02)
        self.t_embed = TimestepEmbedder(d, cfg.t_embed_dim, cfg.horizon)
        self.blocks = nn.ModuleList(
            VDiTBlock(d, cfg.n_heads, cfg.mlp_ratio, "spatial" if i % 2 == 0 else "temporal")
            for i in range(cfg.n_layers)
        )
        # two output groups per patch; only the first is used as velocity
        self.head = FinalLayer(d, 2 * c * p * p)
        nn.init.xavier_uniform_(self.patch_embed.weight)
        nn.init.zeros_(self.patch_embed.bias)

    def forward(self, z_t: torch.Tensor, t) -> torch.Tensor:
        cfg = self.config
        if z_t.ndim != 5:
            raise ValueError(f"expected [B, F, C, H, W], got {tuple(z_t.shape)}")
        b, f, c, h, w = z_t.shape
        if c != cfg.in_channels:
            raise ValueError(f"input has {c} channels, model expects {cfg.in_channels}")
        if (h, w) != tuple(cfg.latent_size):
            raise ValueError(f"latent grid {h}x{w} != configured {cfg.latent_size}")
        if f > cfg.max_frames:
            raise ValueError(f"{f} frames exceed max_frames={cfg.max_frames}")
        t = torch.as_tensor(t, dtype=torch.float64)
        if t.ndim == 0:
            t = t.expand(b)
        cond = self.t_embed(t)

        grid = patchify(z_t, cfg.patch)
        x = self.patch_embed(grid.tokens)
        x = x + self.pos_spatial[None, None] + self.pos_temporal[:f][None, :, None]
        for blk in self.blocks:
            x = blk(x, cond)
        out = self.head(x, cond)
        velocity = out[..., : out.shape[-1] // 2]
        return unpatchify(TokenGrid(velocity, grid.pad_h, grid.pad_w, grid.orig), cfg.patch)
