"""Command-line entry point: ``plumeflow <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or missing-dependency error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import ConfigError, RunConfig
from .diffusion import RolloutPlan, autoregressive_rollout, gaussian_noise, sample
from .metrics import evaluate_rollout, parse_report_csv, summary_table
from .pipeline import (
    MissingStageError,
    error_strip,
    from_physical,
    load_bundle,
    require_checkpoint,
    to_physical,
    write_bundle,
    write_frames,
    write_pgm,
)
from .training import (
    Checkpoint,
    LatentCodec,
    build_vae,
    build_vdit,
    build_vqvae,
    train_autoencoder,
    train_vdit,
)

log = logging.getLogger("plumeflow")


class UsageError(Exception):
    pass


def _plan(text: str) -> RolloutPlan:
    try:
        c, p, n = (int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--plan expects F_c,F_p,n_steps, got {text!r}") from None
    return RolloutPlan(c, p, n)


def _prepare_out(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> None:
    n = args.n_cases if args.n_cases is not None else cfg["data.n_cases"]
    if n < 3:
        raise UsageError(f"--n-cases must be >= 3 (train/val/test split), got {n}")
    if args.seed is not None:
        cfg.set("seed", args.seed)
    cfg.set("data.n_cases", n)
    out = _prepare_out(args.out)
    ds = D.build_dataset(cfg.grid(), n, cfg["seed"],
                         rate_range=(cfg["data.rate_min"], cfg["data.rate_max"]),
                         amp_range=(cfg["data.amp_min"], cfg["data.amp_max"]))
    D.write_dataset(out, ds)
    cfg.write(out / "config.txt")
    print(f"wrote {n} cases of shape {ds.sat.shape[1:]} to {out}")


def _train_ae(args, cfg: RunConfig, stage: str) -> None:
    ds = D.read_dataset(args.data)
    sat, dp = ds.normalized(ds.split.train_ids)
    tc = cfg.train_config(stage)
    resume = Checkpoint.load(args.resume) if args.resume else None
    model = None
    if resume is None:
        if stage == "vae":
            model = build_vae(cfg.vae_spec(), cfg["vae.latent_channels"], cfg["seed"])
        else:
            model = build_vqvae(cfg.vqvae_spec(), cfg["vqvae.latent_channels"],
                                cfg["vqvae.num_codes"], cfg["seed"])
    state, tlog = train_autoencoder(tc, dp if stage == "vae" else sat, model, resume=resume)
    out = _prepare_out(args.out)
    state.save(out, cfg)
    (out / "trainlog.csv").write_text(tlog.to_csv())
    print(f"{stage}: {len(tlog.records)} epochs, final loss {tlog.records[-1].loss:.6g}")


def cmd_train_vae(args, cfg):
    _train_ae(args, cfg, "vae")


def cmd_train_vqvae(args, cfg):
    _train_ae(args, cfg, "vqvae")


def _train_clips(ds: D.PlumeDataset, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    return ds.normalized(ds.split.train_ids, frames=cfg["train.frames"])


def cmd_train_vdit(args, cfg: RunConfig) -> None:
    vae_dir = require_checkpoint(args.vae, "train-vae", ("vae",))
    vq_dir = require_checkpoint(args.vqvae, "train-vqvae", ("vqvae",))
    ds = D.read_dataset(args.data)
    vae, vq = Checkpoint.load(vae_dir).model, Checkpoint.load(vq_dir).model
    codec, latents = LatentCodec.fit(vae, vq, *_train_clips(ds, cfg), sat_norm=ds.sat_norm, dp_norm=ds.dp_norm)
    tc = cfg.train_config("vdit_pretrain")
    if args.resume:
        state, tlog = train_vdit(tc, latents, cfg.schedule(), resume=Checkpoint.load(args.resume))
    else:
        state, tlog = train_vdit(tc, latents, cfg.schedule(), model=build_vdit(cfg.vdit_config(), cfg["seed"]))
    state.extras = codec.extras()
    out = _prepare_out(args.out)
    write_bundle(out, state, vae_dir, vq_dir, cfg)
    cfg.write(out / "config.txt")
    (out / "trainlog.csv").write_text(tlog.to_csv())
    print(f"train-vdit: {len(tlog.records)} epochs, final loss {tlog.records[-1].loss:.6g}")


def cmd_finetune_ar(args, cfg: RunConfig) -> None:
    if not args.init:
        raise MissingStageError("finetune-ar needs --init pointing at a train-vdit output (run `train-vdit` first)")
    init_root = Path(args.init)
    init, codec = load_bundle(init_root)
    ds = D.read_dataset(args.data)
    latents = codec.encode(*_train_clips(ds, cfg))
    tc = cfg.train_config("vdit_finetune")
    if args.resume:
        state, tlog = train_vdit(tc, latents, cfg.schedule(), resume=Checkpoint.load(args.resume))
    else:
        state, tlog = train_vdit(tc, latents, cfg.schedule(), init=init)
    state.extras = codec.extras()
    out = _prepare_out(args.out)
    write_bundle(out, state, init_root / "vae", init_root / "vqvae", cfg)
    cfg.write(out / "config.txt")
    (out / "trainlog.csv").write_text(tlog.to_csv())
    print(f"finetune-ar: {len(tlog.records)} epochs, final loss {tlog.records[-1].loss:.6g}")


def _write_clip_pair(out: Path, name: str, sat: np.ndarray, dp: np.ndarray, codec: LatentCodec):
    D.save_tensor(out / f"{name}_sat.lvgf", sat)
    D.save_tensor(out / f"{name}_dp.lvgf", dp)
    write_frames(out / "frames", f"{name}_sat", sat, codec.sat_norm)
    write_frames(out / "frames", f"{name}_dp", dp, codec.dp_norm)


def cmd_sample(args, cfg: RunConfig) -> None:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    state, codec = load_bundle(args.ckpt)
    mcfg = state.model.config
    frames = state.config.frames
    shape = (args.n, frames, mcfg.in_channels, *mcfg.latent_size)
    z = sample(state.model, gaussian_noise(shape, args.seed), cfg.schedule())
    sat, dp = to_physical(codec, z)
    out = _prepare_out(args.out)
    for i in range(args.n):
        _write_clip_pair(out, f"sample_{i:04d}", sat[i], dp[i], codec)
    D.save_norm(out / "norm.lvgf", codec.sat_norm, codec.dp_norm)
    cfg.write(out / "config.txt")
    print(f"sampled {args.n} clips of {frames} frames into {out}")


def _load_context(path: str, plan: RolloutPlan, cases: str | None):
    """(ids, sat, dp) context clips in physical units, F_c frames each."""
    p = Path(path)
    if p.is_dir():
        ids = D.list_case_ids(p)
        if cases:
            ids = [int(x) for x in cases.split(",")]
        elif (p / "split.txt").exists():
            ids = D.load_split(p / "split.txt").test_ids
        sat = np.stack([D.load_tensor(D.case_paths(p, i)[0])[: plan.context] for i in ids])
        dp = np.stack([D.load_tensor(D.case_paths(p, i)[1])[: plan.context] for i in ids])
        if sat.shape[1] != plan.context:
            raise UsageError(f"context clips have {sat.shape[1]} frames, plan needs {plan.context}")
        return ids, sat, dp
    sat = D.load_tensor(f"{path}_sat.lvgf")
    dp = D.load_tensor(f"{path}_dp.lvgf")
    if sat.shape[0] != plan.context or dp.shape[0] != plan.context:
        raise UsageError(f"context clip has {sat.shape[0]} frames, plan needs F_c={plan.context}")
    case_id = int(p.name.split("_")[1]) if p.name.startswith("case_") else 0
    return [case_id], sat[None], dp[None]


def cmd_rollout(args, cfg: RunConfig) -> None:
    plan = _plan(args.plan)
    state, codec = load_bundle(args.ckpt)
    if plan.window > state.model.config.max_frames:
        raise UsageError(f"window {plan.window} exceeds model max_frames")
    ids, sat, dp = _load_context(args.context, plan, args.cases)
    ctx = from_physical(codec, sat, dp)
    z = autoregressive_rollout(state.model, ctx, plan, cfg.schedule(), noise_seed=args.seed)
    out_sat, out_dp = to_physical(codec, z)
    # context frames are passed through untouched, not re-decoded
    out_sat[:, : plan.context] = sat
    out_dp[:, : plan.context] = dp
    out = _prepare_out(args.out)
    for k, case_id in enumerate(ids):
        _write_clip_pair(out, f"case_{case_id:04d}", out_sat[k], out_dp[k], codec)
    D.save_norm(out / "norm.lvgf", codec.sat_norm, codec.dp_norm)
    cfg.write(out / "config.txt")
    print(f"rolled out {len(ids)} clips to {plan.lengths[-1]} frames into {out}")


def _inventory(pred_dir: Path, truth_dir: Path, plan: RolloutPlan):
    ids = D.list_case_ids(pred_dir)
    if not ids:
        raise UsageError(f"no predicted clips under {pred_dir}")
    truth_ids = set(D.list_case_ids(truth_dir))
    missing = [i for i in ids if i not in truth_ids]
    if missing:
        raise UsageError(f"truth directory lacks cases: {', '.join(str(i) for i in missing)}")
    length = plan.lengths[-1]
    sat_n, dp_n = D.load_norm(truth_dir / "norm.lvgf")
    clips = {"pred": {"saturation": [], "pressure": []}, "truth": {"saturation": [], "pressure": []}}
    for which, root in (("pred", pred_dir), ("truth", truth_dir)):
        for i in ids:
            s, p = (D.load_tensor(x) for x in D.case_paths(root, i))
            if s.shape[0] < length:
                raise UsageError(f"{which} case {i} has {s.shape[0]} frames, plan needs {length}")
            clips[which]["saturation"].append(D.normalize(s[:length], sat_n)[0])
            clips[which]["pressure"].append(D.normalize(p[:length], dp_n)[0])
    stack = lambda d: {k: np.stack(v) for k, v in d.items()}  # noqa: E731
    return ids, stack(clips["pred"]), stack(clips["truth"]), (sat_n, dp_n)


def cmd_eval(args, cfg: RunConfig) -> None:
    plan = _plan(args.plan)
    _, pred, truth, _ = _inventory(Path(args.pred), Path(args.truth), plan)
    report = evaluate_rollout(pred, truth, plan, {"saturation": 1.0, "pressure": 2.0})
    out = _prepare_out(args.out)
    (out / "metrics.csv").write_text(report.to_csv())
    cfg.write(out / "config.txt")
    print(summary_table(parse_report_csv(report.to_csv())), end="")


def cmd_report(args, cfg: RunConfig) -> None:
    rows = parse_report_csv(Path(args.input).read_text())
    out = _prepare_out(args.out)
    (out / "summary.txt").write_text(summary_table(rows))
    if args.pred and args.truth:
        plan = _plan(args.plan)
        ids, pred, truth, (sat_n, dp_n) = _inventory(Path(args.pred), Path(args.truth), plan)
        stats = {"saturation": D.NormStats(0.0, 1.0, "minmax01"), "pressure": D.NormStats(-1.0, 1.0, "minmax_sym")}
        for k, case_id in enumerate(ids):
            for fld in ("saturation", "pressure"):
                sl = slice(plan.context, plan.lengths[-1])
                strip = error_strip(pred[fld][k, sl], truth[fld][k, sl], stats[fld])
                write_pgm(out / f"strip_case_{case_id:04d}_{fld}.pgm", strip)
    cfg.write(out / "config.txt")
    print((out / "summary.txt").read_text(), end="")


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plumeflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate synthetic plume cases")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cases", type=int)
    p.add_argument("--seed", type=int)

    for name, func in (("train-vae", cmd_train_vae), ("train-vqvae", cmd_train_vqvae)):
        p = add(name, func, f"stage I: {name[6:]}")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--resume")

    p = add("train-vdit", cmd_train_vdit, "stage II: VDiT pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vae")
    p.add_argument("--vqvae")
    p.add_argument("--resume")

    p = add("finetune-ar", cmd_finetune_ar, "stage III: masked autoregressive fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init")
    p.add_argument("--resume")

    p = add("sample", cmd_sample, "unconditional generation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("rollout", cmd_rollout, "conditional sliding-window rollout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", required=True,
                   help="dataset directory or case file prefix (…/case_0007)")
    p.add_argument("--cases", help="comma-separated case ids when --context is a directory")
    p.add_argument("--plan", default="15,2,4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "stage-wise metrics of rollouts against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--plan", default="15,2,4")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "summary table and error strips")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--plan", default="15,2,4")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = RunConfig.load(args.config)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            cfg.set(*(s.strip() for s in item.split("=", 1)))
        _seed_everything(cfg["seed"])
        args.func(args, cfg)
    except (UsageError, ConfigError, MissingStageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
