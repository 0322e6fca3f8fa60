"""Synthetic saturation / pressure-buildup plume videos and their storage.

The generator is a geometric stand-in for a radial injection simulation:
a plume front grows with the square root of time, row-wise permeability
multipliers make the front heterogeneous, and pressure build-up decays
away from the well. Both fields share the same radial geometry and frame
times, which is the coupling the diffusion model has to learn.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"LVGF"
FORMAT_VERSION = 1
MAX_RANK = 5

SATURATION = "saturation"
PRESSURE = "pressure"

T_END = 30.0


class GenerationError(ValueError):
    """A plume parameter produced a non-finite or out-of-bounds field."""


class TensorFormatError(ValueError):
    """Malformed LVGF tensor container."""


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    frames: int
    well_column: int = 0
    downsample: int = 8

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.height}x{self.width}")
        if self.height % self.downsample or self.width % self.downsample:
            raise ValueError(
                f"grid {self.height}x{self.width} not divisible by downsample factor {self.downsample}"
            )
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if not 0 <= self.well_column < self.width:
            raise ValueError(f"well_column {self.well_column} outside [0, {self.width})")

    def frame_times(self, t_end: float = T_END) -> np.ndarray:
        """Logarithmically spaced frame times in [1, t_end]."""
        return np.exp(np.linspace(0.0, np.log(t_end), self.frames))


@dataclass(frozen=True)
class PlumeParams:
    seed: int
    plume_rate: float
    sat_exponent: float
    perm_profile: np.ndarray = field(repr=False)
    pressure_amp: float
    pressure_decay: float

    def __post_init__(self):
        for name in ("plume_rate", "sat_exponent", "pressure_amp", "pressure_decay"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise GenerationError(f"{name} must be finite and > 0, got {value!r}")
        k = np.asarray(self.perm_profile, dtype=np.float64)
        if k.ndim != 1 or not np.all(np.isfinite(k)) or np.any(k <= 0) or np.any(k > 1):
            raise GenerationError("perm_profile entries must be finite and in (0, 1]")

    @classmethod
    def draw(
        cls,
        seed: int,
        height: int,
        rate_range: tuple[float, float] = (3.0, 11.5),
        exponent_range: tuple[float, float] = (0.6, 1.4),
        amp_range: tuple[float, float] = (0.4, 2.0),
        decay_range: tuple[float, float] = (4.0, 16.0),
        perm_range: tuple[float, float] = (0.5, 1.0),
    ) -> PlumeParams:
        """Draw one case's parameters from a seeded generator."""
        rng = np.random.default_rng(seed)
        return cls(
            seed=seed,
            plume_rate=float(rng.uniform(*rate_range)),
            sat_exponent=float(rng.uniform(*exponent_range)),
            perm_profile=rng.uniform(*perm_range, size=height),
            pressure_amp=float(rng.uniform(*amp_range)),
            pressure_decay=float(rng.uniform(*decay_range)),
        )


@dataclass(frozen=True)
class NormStats:
    min: float
    max: float
    kind: str  # "minmax01" or "minmax_sym"

    def __post_init__(self):
        if self.kind not in ("minmax01", "minmax_sym"):
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if not self.max > self.min:
            raise ValueError(f"degenerate normalization range [{self.min}, {self.max}]")

    @classmethod
    def for_field(cls, values: np.ndarray, field_kind: str) -> NormStats:
        lo, hi = float(np.min(values)), float(np.max(values))
        return cls(lo, hi, _kind_for(field_kind))


@dataclass
class FieldClip:
    values: np.ndarray  # [F, 1, H, W]
    field_kind: str
    norm: NormStats | None = None

    def __post_init__(self):
        if self.field_kind not in (SATURATION, PRESSURE):
            raise ValueError(f"unknown field kind {self.field_kind!r}")
        if self.values.ndim != 4 or self.values.shape[1] != 1:
            raise ValueError(f"FieldClip values must be [F, 1, H, W], got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("FieldClip contains non-finite values")


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: list[int]
    val_ids: list[int]
    test_ids: list[int]
    split_seed: int


def _kind_for(field_kind: str) -> str:
    return "minmax01" if field_kind == SATURATION else "minmax_sym"


def generate_case(grid: GridSpec, params: PlumeParams) -> tuple[FieldClip, FieldClip]:
    """Build the (saturation, pressure build-up) clip pair for one case.

    Saturation is ``clamp(1 - r / (k_i * rate * sqrt(t)), 0, 1) ** gamma`` and
    pressure build-up is ``A * sqrt(t) / (1 + r / decay)`` with ``r`` the
    column distance to the well.
    """
    k = np.asarray(params.perm_profile, dtype=np.float64)
    if k.shape != (grid.height,):
        raise GenerationError(
            f"perm_profile has {k.shape[0]} rows, grid has {grid.height}"
        )
    times = grid.frame_times()
    sqrt_t = np.sqrt(times)
    final_radius = float(np.max(k) * params.plume_rate * sqrt_t[-1])
    if not np.isfinite(final_radius) or final_radius > 2 * grid.width:
        raise GenerationError(
            f"plume_rate={params.plume_rate} gives final plume radius {final_radius:.1f} > 2*width"
        )

    r = np.abs(np.arange(grid.width) - grid.well_column).astype(np.float64)
    radius = k[None, :, None] * params.plume_rate * sqrt_t[:, None, None]  # [F, H, 1]
    with np.errstate(all="ignore"):
        sat = np.clip(1.0 - r[None, None, :] / radius, 0.0, 1.0) ** params.sat_exponent
        dp = params.pressure_amp * sqrt_t[:, None, None] / (1.0 + r[None, None, :] / params.pressure_decay)
    dp = np.broadcast_to(dp, sat.shape)
    if not np.all(np.isfinite(sat)):
        raise GenerationError(f"sat_exponent={params.sat_exponent} produced non-finite saturation")
    if not np.all(np.isfinite(dp)):
        raise GenerationError(
            f"pressure_amp={params.pressure_amp}, pressure_decay={params.pressure_decay} "
            "produced non-finite pressure"
        )
    sat = sat[:, None].astype(np.float32)
    dp = np.ascontiguousarray(dp[:, None], dtype=np.float32)
    return FieldClip(sat, SATURATION), FieldClip(dp, PRESSURE)


def normalize(
    clip: FieldClip | np.ndarray,
    stats: NormStats | None = None,
    field_kind: str | None = None,
) -> tuple[FieldClip | np.ndarray, NormStats]:
    """Map a clip to [0, 1] (saturation) or [-1, 1] (pressure).

    Without ``stats`` the range is taken from the clip itself. Accepts a bare
    array when ``field_kind`` or ``stats`` identify the mapping.
    """
    values = clip.values if isinstance(clip, FieldClip) else np.asarray(clip)
    if stats is None:
        kind = clip.field_kind if isinstance(clip, FieldClip) else field_kind
        if kind is None:
            raise ValueError("field_kind required to normalize a bare array without stats")
        stats = NormStats.for_field(values, kind)
    scaled = (values.astype(np.float64) - stats.min) / (stats.max - stats.min)
    if stats.kind == "minmax_sym":
        scaled = 2.0 * scaled - 1.0
    out = scaled.astype(values.dtype if values.dtype.kind == "f" else np.float64)
    if isinstance(clip, FieldClip):
        return FieldClip(out, clip.field_kind, stats), stats
    return out, stats


def denormalize(clip: FieldClip | np.ndarray, stats: NormStats) -> FieldClip | np.ndarray:
    values = clip.values if isinstance(clip, FieldClip) else np.asarray(clip)
    v = values.astype(np.float64)
    if stats.kind == "minmax_sym":
        v = (v + 1.0) / 2.0
    out = (v * (stats.max - stats.min) + stats.min).astype(
        values.dtype if values.dtype.kind == "f" else np.float64
    )
    if isinstance(clip, FieldClip):
        return FieldClip(out, clip.field_kind, None)
    return out


def split_dataset(
    n: int,
    ratios: Sequence[float] = (0.818, 0.091, 0.091),
    seed: int = 0,
) -> DatasetSplit:
    """Seeded train/val/test partition.

    Validation and test sizes are ``round(n * ratio)`` (ties to even);
    train takes the remainder.
    """
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    n_val = max(1, round(n * ratios[1]))
    n_test = max(1, round(n * ratios[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"ratios {tuple(ratios)} leave no training samples for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        train_ids=sorted(int(i) for i in perm[:n_train]),
        val_ids=sorted(int(i) for i in perm[n_train:n_train + n_val]),
        test_ids=sorted(int(i) for i in perm[n_train + n_val:]),
        split_seed=seed,
    )


# -- LVGF tensor container ---------------------------------------------------


def save_tensor(path: str | os.PathLike, tensor) -> None:
    """Write ``tensor`` as little-endian float32 in the LVGF container."""
    arr = np.asarray(tensor)
    if arr.ndim > MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"all dims must be > 0, got {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack(f"<II{arr.ndim}I", FORMAT_VERSION, arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_tensor(blob)


def parse_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 12:
        raise TensorFormatError("truncated header")
    if blob[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    if rank > MAX_RANK:
        raise TensorFormatError(f"rank {rank} exceeds {MAX_RANK}")
    offset = 12 + 4 * rank
    if len(blob) < offset:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero dimension in shape {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    payload = len(blob) - offset
    if payload < 4 * count:
        raise TensorFormatError("truncated payload")
    if payload > 4 * count:
        raise TensorFormatError(f"dim mismatch: {payload - 4 * count} trailing bytes")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return arr.reshape(dims).astype(np.float32)


# -- dataset directories -------------------------------------------------------


def case_paths(root: str | os.PathLike, case_id: int) -> tuple[Path, Path]:
    root = Path(root)
    return root / f"case_{case_id:04d}_sat.lvgf", root / f"case_{case_id:04d}_dp.lvgf"


def list_case_ids(root: str | os.PathLike) -> list[int]:
    ids = []
    for p in Path(root).glob("case_*_sat.lvgf"):
        ids.append(int(p.name.split("_")[1]))
    return sorted(ids)


def save_norm(path: str | os.PathLike, sat: NormStats, dp: NormStats) -> None:
    save_tensor(path, np.array([sat.min, sat.max, dp.min, dp.max], dtype=np.float32))


def load_norm(path: str | os.PathLike) -> tuple[NormStats, NormStats]:
    v = load_tensor(path).astype(np.float64)
    if v.shape != (4,):
        raise TensorFormatError(f"norm file must hold 4 values, got shape {v.shape}")
    return NormStats(v[0], v[1], "minmax01"), NormStats(v[2], v[3], "minmax_sym")


def save_split(path: str | os.PathLike, split: DatasetSplit) -> None:
    lines = [f"seed={split.split_seed}"]
    for name in ("train", "val", "test"):
        ids = getattr(split, f"{name}_ids")
        lines.append(f"{name}=" + ",".join(str(i) for i in ids))
    Path(path).write_text("\n".join(lines) + "\n")


def load_split(path: str | os.PathLike) -> DatasetSplit:
    entries = dict(line.split("=", 1) for line in Path(path).read_text().splitlines() if line)
    parse = lambda s: [int(x) for x in s.split(",") if x]  # noqa: E731
    return DatasetSplit(
        parse(entries["train"]), parse(entries["val"]), parse(entries["test"]), int(entries["seed"])
    )


@dataclass
class PlumeDataset:
    """Raw (physical-unit) clips plus global normalization statistics."""

    sat: np.ndarray  # [N, F, 1, H, W]
    dp: np.ndarray
    split: DatasetSplit
    sat_norm: NormStats
    dp_norm: NormStats

    @property
    def n_cases(self) -> int:
        return self.sat.shape[0]

    def normalized(self, ids: Sequence[int] | None = None, frames: int | None = None):
        """Normalized (sat, dp) arrays, optionally restricted to cases / leading frames."""
        ids = list(range(self.n_cases)) if ids is None else list(ids)
        sl = slice(None) if frames is None else slice(0, frames)
        sat, _ = normalize(self.sat[ids][:, sl], self.sat_norm)
        dp, _ = normalize(self.dp[ids][:, sl], self.dp_norm)
        return sat, dp


def build_dataset(grid: GridSpec, n_cases: int, seed: int, **draw_kw) -> PlumeDataset:
    """Generate ``n_cases`` cases; normalization uses training-split statistics."""
    sats, dps = [], []
    for case_id in range(n_cases):
        case_seed = int(np.random.SeedSequence([seed, case_id]).generate_state(1)[0])
        params = PlumeParams.draw(case_seed, grid.height, **draw_kw)
        s, p = generate_case(grid, params)
        sats.append(s.values)
        dps.append(p.values)
    sat, dp = np.stack(sats), np.stack(dps)
    split = split_dataset(n_cases, seed=seed)
    return PlumeDataset(
        sat,
        dp,
        split,
        NormStats.for_field(sat[split.train_ids], SATURATION),
        NormStats.for_field(dp[split.train_ids], PRESSURE),
    )


def write_dataset(root: str | os.PathLike, ds: PlumeDataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(ds.n_cases):
        sat_path, dp_path = case_paths(root, i)
        save_tensor(sat_path, ds.sat[i])
        save_tensor(dp_path, ds.dp[i])
    save_norm(root / "norm.lvgf", ds.sat_norm, ds.dp_norm)
    save_split(root / "split.txt", ds.split)


def read_dataset(root: str | os.PathLike) -> PlumeDataset:
    root = Path(root)
    ids = list_case_ids(root)
    if not ids:
        raise FileNotFoundError(f"no case_*_sat.lvgf files under {root}")
    sat = np.stack([load_tensor(case_paths(root, i)[0]) for i in ids])
    dp = np.stack([load_tensor(case_paths(root, i)[1]) for i in ids])
    sat_norm, dp_norm = load_norm(root / "norm.lvgf")
    split = load_split(root / "split.txt")
    return PlumeDataset(sat, dp, split, sat_norm, dp_norm)
