"""2D frame autoencoders: a Gaussian VAE for pressure build-up and a VQ-VAE
for gas saturation. Frames are encoded independently; there is no
attention inside either model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ConvStackSpec:
    channels: tuple[int, ...] = (32, 64, 96, 128)
    residual_per_block: int = 1
    norm_groups: int = 32
    has_mid_block: bool = True

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("channel list needs at least two levels")

    @property
    def n_down(self) -> int:
        return len(self.channels) - 1

    @property
    def n_up(self) -> int:
        return self.n_down

    @property
    def factor(self) -> int:
        return 2 ** self.n_down


# desk presets; full-scale widths for 96x200 fields are the *_FULL_SCALE specs below
VQ_DESK = ConvStackSpec((16, 32, 48, 64), residual_per_block=1, norm_groups=16)
VAE_DESK = ConvStackSpec((16, 32, 48, 64), residual_per_block=1, norm_groups=16)
VQ_FULL_SCALE = ConvStackSpec((256, 384, 512, 1024), residual_per_block=2, norm_groups=32)
VAE_FULL_SCALE = ConvStackSpec((32, 64, 128, 128), residual_per_block=1, norm_groups=16)


@dataclass
class VaeLatent:
    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass
class QuantResult:
    indices: torch.Tensor  # [..., H', W'] int64
    z_q: torch.Tensor  # [..., C, H', W']
    z_e: torch.Tensor


@dataclass
class AeLossReport:
    recon: torch.Tensor
    kl_or_codebook: torch.Tensor
    commit: torch.Tensor
    beta: float
    total: torch.Tensor
    weights: dict = field(default_factory=dict)

    def components(self) -> dict[str, float]:
        return {
            "recon": float(self.recon.detach()),
            "kl_or_codebook": float(self.kl_or_codebook.detach()),
            "commit": float(self.commit.detach()),
        }

    def recomputed_total(self) -> float:
        return sum(self.weights.get(k, 1.0) * v for k, v in self.components().items())


def _groups(channels: int, preferred: int) -> int:
    return math.gcd(min(preferred, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in, groups), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out, groups), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, spec: ConvStackSpec, in_channels: int, out_channels: int):
        super().__init__()
        ch, g = spec.channels, spec.norm_groups
        self.conv_in = nn.Conv2d(in_channels, ch[0], 3, padding=1)
        blocks = []
        for lvl in range(spec.n_down):
            for _ in range(spec.residual_per_block):
                blocks.append(ResBlock(ch[lvl], ch[lvl], g))
            blocks.append(nn.Conv2d(ch[lvl], ch[lvl + 1], 3, stride=2, padding=1))
        self.down = nn.Sequential(*blocks)
        self.mid = ResBlock(ch[-1], ch[-1], g) if spec.has_mid_block else nn.Identity()
        self.norm_out = nn.GroupNorm(_groups(ch[-1], g), ch[-1])
        self.conv_out = nn.Conv2d(ch[-1], out_channels, 3, padding=1)

    def forward(self, x):
        h = self.mid(self.down(self.conv_in(x)))
        return self.conv_out(F.silu(self.norm_out(h)))


class Upsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Decoder(nn.Module):
    def __init__(self, spec: ConvStackSpec, in_channels: int, out_channels: int):
        super().__init__()
        ch, g = spec.channels, spec.norm_groups
        self.conv_in = nn.Conv2d(in_channels, ch[-1], 3, padding=1)
        self.mid = ResBlock(ch[-1], ch[-1], g) if spec.has_mid_block else nn.Identity()
        blocks = []
        for lvl in range(spec.n_up, 0, -1):
            for _ in range(spec.residual_per_block):
                blocks.append(ResBlock(ch[lvl], ch[lvl], g))
            blocks.append(Upsample(ch[lvl], ch[lvl - 1]))
        self.up = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(_groups(ch[0], g), ch[0])
        self.conv_out = nn.Conv2d(ch[0], out_channels, 3, padding=1)

    def forward(self, z):
        h = self.up(self.mid(self.conv_in(z)))
        return self.conv_out(F.silu(self.norm_out(h)))


def _check_frame(x: torch.Tensor, factor: int) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"frame {h}x{w} not divisible by downsample factor {factor}")


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean per-element KL(N(mu, exp(logvar)) || N(0, 1))."""
    return 0.5 * torch.mean(mu.pow(2) + logvar.exp() - logvar - 1.0)


class PressureVAE(nn.Module):
    def __init__(self, spec: ConvStackSpec = VAE_DESK, latent_channels: int = 4, in_channels: int = 1):
        super().__init__()
        self.spec = spec
        self.latent_channels = latent_channels
        self.encoder = Encoder(spec, in_channels, 2 * latent_channels)
        self.decoder = Decoder(spec, latent_channels, in_channels)

    @property
    def factor(self) -> int:
        return self.spec.factor

    def encode(self, x: torch.Tensor) -> VaeLatent:
        _check_frame(x, self.factor)
        mu, logvar = self.encoder(x).chunk(2, dim=-3)
        return VaeLatent(mu, logvar)

    @staticmethod
    def sample(lat: VaeLatent, noise: torch.Tensor) -> torch.Tensor:
        return lat.mu + torch.exp(0.5 * lat.logvar) * noise

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None):
        lat = self.encode(x)
        if noise is None:
            noise = torch.randn_like(lat.mu)
        return self.decode(self.sample(lat, noise)), lat


def vae_loss(x: torch.Tensor, x_hat: torch.Tensor, lat: VaeLatent, beta: float) -> AeLossReport:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    recon = F.mse_loss(x_hat, x)
    kl = kl_divergence(lat.mu, lat.logvar)
    zero = torch.zeros((), dtype=recon.dtype)
    return AeLossReport(
        recon, kl, zero, beta, recon + beta * kl,
        weights={"recon": 1.0, "kl_or_codebook": beta, "commit": 0.0},
    )


class Codebook(nn.Module):
    def __init__(self, num_codes: int = 512, dim: int = 2):
        super().__init__()
        if num_codes < 2:
            raise ValueError(f"codebook needs at least 2 entries, got {num_codes}")
        self.embedding = nn.Parameter(torch.empty(num_codes, dim))
        nn.init.uniform_(self.embedding, -1.0 / num_codes, 1.0 / num_codes)

    @property
    def num_codes(self) -> int:
        return self.embedding.shape[0]


def quantize(z_e: torch.Tensor, codebook: torch.Tensor) -> QuantResult:
    """Snap every spatial vector of ``z_e`` ([..., C, H, W]) to its nearest
    codebook row; ties go to the lowest index.

    Distances are exact squared differences (no expansion trick), so ties
    between equidistant entries compare equal and ``argmin`` picks the first.
    """
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    c = z_e.shape[-3]
    if codebook.shape[1] != c:
        raise ValueError(f"z_e has {c} channels, codebook entries have dim {codebook.shape[1]}")
    flat = z_e.detach().movedim(-3, -1).reshape(-1, c)
    indices = torch.empty(flat.shape[0], dtype=torch.long)
    chunk = max(1, 2**20 // codebook.shape[0])
    for start in range(0, flat.shape[0], chunk):
        part = flat[start:start + chunk]
        d = (part[:, None, :] - codebook.detach()[None, :, :]).pow(2).sum(-1)
        indices[start:start + chunk] = torch.argmin(d, dim=1)
    z_q = F.embedding(indices, codebook)  # gradient reaches the codebook here
    spatial = z_e.shape[:-3] + z_e.shape[-2:]
    z_q = z_q.reshape(*spatial, c).movedim(-1, -3)
    return QuantResult(indices.reshape(spatial), z_q, z_e)


def straight_through(q: QuantResult) -> torch.Tensor:
    """Decoder input: forward value z_q, gradient routed to z_e."""
    return q.z_e + (q.z_q - q.z_e).detach()


def vqvae_loss(x: torch.Tensor, x_hat: torch.Tensor, q: QuantResult, beta: float) -> AeLossReport:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if q.z_e.shape != q.z_q.shape:
        raise ValueError("z_e / z_q shape mismatch")
    recon = F.mse_loss(x_hat, x)
    codebook = F.mse_loss(q.z_q, q.z_e.detach())
    commit = beta * F.mse_loss(q.z_e, q.z_q.detach())
    return AeLossReport(
        recon, codebook, commit, beta, recon + codebook + commit,
        weights={"recon": 1.0, "kl_or_codebook": 1.0, "commit": 1.0},
    )


class SaturationVQVAE(nn.Module):
    def __init__(
        self,
        spec: ConvStackSpec = VQ_DESK,
        latent_channels: int = 2,
        num_codes: int = 512,
        in_channels: int = 1,
    ):
        super().__init__()
        self.spec = spec
        self.latent_channels = latent_channels
        self.encoder = Encoder(spec, in_channels, latent_channels)
        self.codebook = Codebook(num_codes, latent_channels)
        self.decoder = Decoder(spec, latent_channels, in_channels)

    @property
    def factor(self) -> int:
        return self.spec.factor

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_frame(x, self.factor)
        return self.encoder(x)

    def quantize(self, z_e: torch.Tensor) -> QuantResult:
        return quantize(z_e, self.codebook.embedding)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        return self.decoder(z_q)

    def forward(self, x: torch.Tensor):
        q = self.quantize(self.encode(x))
        return self.decode(straight_through(q)), q
