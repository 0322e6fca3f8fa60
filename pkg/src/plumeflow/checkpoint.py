"""Checkpoint directories built from LVGF tensor files.

Layout::

    <dir>/manifest.txt      name file shape (one tensor per line)
    <dir>/meta.txt          key=value metadata (stage, epoch, model kind)
    <dir>/config.txt        resolved run configuration snapshot
    <dir>/tensors/*.lvgf    parameters, optimizer moments, rng state, extras
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch

from .data import load_tensor, save_tensor


def _safe(name: str) -> str:
    return name.replace("/", "__")


def save_tensors(root: str | os.PathLike, tensors: dict[str, torch.Tensor | np.ndarray]) -> None:
    root = Path(root)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        fname = f"tensors/{_safe(name)}.lvgf"
        save_tensor(root / fname, arr)
        lines.append(f"{name} {fname} {','.join(str(d) for d in arr.shape)}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_tensors(root: str | os.PathLike) -> dict[str, torch.Tensor]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, fname, shape = line.split()
        arr = load_tensor(root / fname)
        expected = tuple(int(d) for d in shape.split(","))
        if arr.shape != expected:
            raise ValueError(f"{name}: manifest shape {expected} != file shape {arr.shape}")
        out[name] = torch.from_numpy(arr)
    return out


def write_meta(root: str | os.PathLike, meta: dict) -> None:
    Path(root, "meta.txt").write_text("".join(f"{k}={meta[k]}\n" for k in sorted(meta)))


def read_meta(root: str | os.PathLike) -> dict[str, str]:
    text = Path(root, "meta.txt").read_text()
    return dict(line.split("=", 1) for line in text.splitlines() if line)


def module_state(module: torch.nn.Module, prefix: str = "param/") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_state(module: torch.nn.Module, tensors: dict, prefix: str = "param/") -> None:
    state = {}
    for key, ref in module.state_dict().items():
        t = tensors[prefix + key]
        state[key] = t.reshape(ref.shape).to(ref.dtype)
    module.load_state_dict(state)


def optimizer_state(opt: torch.optim.Optimizer, names: list[str]) -> dict[str, torch.Tensor]:
    """Adam-family moments keyed by parameter name."""
    out = {}
    sd = opt.state_dict()
    for idx, name in enumerate(names):
        st = sd["state"].get(idx)
        if not st:
            continue
        for key, value in st.items():
            out[f"optim/{name}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
    return out


def load_optimizer_state(opt: torch.optim.Optimizer, names: list[str], tensors: dict) -> None:
    sd = opt.state_dict()
    params = [p for g in opt.param_groups for p in g["params"]]
    state = {}
    for idx, (name, p) in enumerate(zip(names, params)):
        prefix = f"optim/{name}/"
        if prefix + "step" not in tensors:
            continue
        state[idx] = {
            "step": tensors[prefix + "step"].reshape(()).clone(),
            "exp_avg": tensors[prefix + "exp_avg"].reshape(p.shape).clone(),
            "exp_avg_sq": tensors[prefix + "exp_avg_sq"].reshape(p.shape).clone(),
        }
    sd["state"] = state
    opt.load_state_dict(sd)


def rng_to_tensor(gen: torch.Generator) -> torch.Tensor:
    return gen.get_state().to(torch.float32)


def rng_from_tensor(gen: torch.Generator, t: torch.Tensor) -> None:
    gen.set_state(t.reshape(-1).to(torch.uint8))


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def directory_digest(root: str | os.PathLike) -> str:
    """SHA-256 over every file (path + bytes) under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
