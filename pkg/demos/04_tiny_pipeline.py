"""Train every stage at toy scale and roll a held-out case forward.

This takes about a minute on one CPU core.  The numbers are not meant to be
good, only to show the moving parts in the order the CLI runs them.

Run: python demos/04_tiny_pipeline.py
"""
import numpy as np
import torch

from plumeflow.config import RunConfig
from plumeflow.data import build_dataset
from plumeflow.diffusion import autoregressive_rollout
from plumeflow.metrics import mse
from plumeflow.training import LatentCodec, build_vae, build_vdit, build_vqvae, train_autoencoder, train_vdit

torch.set_num_threads(1)
cfg = RunConfig({
    "grid.height": "16", "grid.width": "32", "grid.frames": "10",
    "data.rate_min": "1.5", "data.rate_max": "5.0",
    "vae.channels": "8,8,16,16", "vae.norm_groups": "4",
    "vqvae.channels": "8,8,16,16", "vqvae.norm_groups": "4", "vqvae.num_codes": "64",
    "vdit.hidden_dim": "64", "vdit.n_layers": "2", "vdit.n_heads": "2", "vdit.head_dim": "32",
    "train.frames": "8", "rollout.context": "6", "rollout.predict": "2", "rollout.n_steps": "2",
    "train.vae.epochs": "15", "train.vqvae.epochs": "15", "train.vdit.epochs": "40", "train.ar.epochs": "20",
})
ds = build_dataset(cfg.grid(), 6, cfg["seed"], rate_range=(1.5, 5.0))
train = ds.split.train_ids
sat, dp = ds.normalized()

vae, log = train_autoencoder(cfg.train_config("vae"), dp[train], build_vae(cfg.vae_spec(), cfg["vae.latent_channels"], 0))
print(f"VAE recon {log.records[0].components['recon']:.4f} -> {log.records[-1].components['recon']:.4f}")
vq, log = train_autoencoder(cfg.train_config("vqvae"), sat[train],
                            build_vqvae(cfg.vqvae_spec(), cfg["vqvae.latent_channels"], cfg["vqvae.num_codes"], 0))
print(f"VQ-VAE recon {log.records[0].components['recon']:.4f} -> {log.records[-1].components['recon']:.4f}")

codec, latents = LatentCodec.fit(vae.model.eval(), vq.model.eval(), sat[train, :8], dp[train, :8])
print("latent clips:", tuple(latents.shape))

pre, log = train_vdit(cfg.train_config("vdit_pretrain"), latents, cfg.schedule(), model=build_vdit(cfg.vdit_config(), 0))
print(f"pre-training loss {log.losses[0]:.3f} -> {log.losses[-1]:.3f}")
ar, log = train_vdit(cfg.train_config("vdit_finetune"), latents, cfg.schedule(), init=pre)
print(f"fine-tuning loss {log.losses[0]:.3f} -> {log.losses[-1]:.3f}")

test = ds.split.test_ids
z = codec.encode(sat[test], dp[test])
clip = autoregressive_rollout(ar.model, z[:, :6], cfg.plan(), cfg.schedule(), noise_seed=0)
pred_sat, pred_dp = codec.decode(clip)
for name, pred, truth in (("saturation", pred_sat, sat[test]), ("pressure", pred_dp, dp[test])):
    hold = np.repeat(truth[:, 5:6], 4, axis=1)
    print(f"{name}: rollout MSE {mse(pred[:, 6:], truth[:, 6:]):.4f}, repeat-last-frame MSE {mse(hold, truth[:, 6:]):.4f}")
