import numpy as np
import pytest
import torch

from plumeflow.autoencoders import ConvStackSpec
from plumeflow.checkpoint import directory_digest, parameter_hash
from plumeflow.config import RunConfig
from plumeflow.data import GridSpec, build_dataset
from plumeflow.diffusion import DiffusionSchedule
from plumeflow.training import (
    Checkpoint,
    LatentCodec,
    TrainConfig,
    TrainingError,
    build_vae,
    build_vdit,
    build_vqvae,
    encode_dataset,
    shuffle_rows,
    train_autoencoder,
    train_vdit,
)
from plumeflow.vdit import VDiTConfig

SPEC = ConvStackSpec((8, 8, 16, 16), residual_per_block=1, norm_groups=4)
VCFG = VDiTConfig(in_channels=6, latent_size=(2, 4), hidden_dim=32, n_layers=2, n_heads=2,
                  head_dim=16, t_embed_dim=16, max_frames=8)
SCHED = DiffusionSchedule()


@pytest.fixture(scope="module")
def clips():
    ds = build_dataset(GridSpec(16, 32, 6), 4, seed=1, rate_range=(1.5, 5.5))
    return ds.normalized()


def params_bytes(model):
    return b"".join(p.detach().numpy().tobytes() for p in model.parameters())


def ae_config(stage="vae", epochs=3, **kw):
    return TrainConfig(stage, epochs=epochs, batch_size=2, lr=2e-3, seed=5, frames=6,
                       loss_beta=1e-4 if stage == "vae" else 0.25, **kw)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0),
                                    dict(optimizer="sgd"), dict(precision="fp16"), dict(augment="flip")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig("vae", **kw)

    def test_context_must_leave_prediction(self):
        with pytest.raises(ValueError):
            TrainConfig("vdit_finetune", frames=17, context=17)

    def test_run_config_stage_views(self):
        cfg = RunConfig({"grid.frames": "23"})
        assert cfg.train_config("vae").frames == 23
        assert cfg.train_config("vdit_pretrain").frames == 17
        assert cfg.train_config("vdit_finetune").context == 15


class TestAutoencoderTraining:
    @pytest.mark.parametrize("stage", ["vae", "vqvae"])
    def test_determinism_and_bookkeeping(self, clips, stage):
        sat, dp = clips
        x = dp if stage == "vae" else sat
        runs = []
        for _ in range(2):
            model = build_vae(SPEC, 4, 0) if stage == "vae" else build_vqvae(SPEC, 2, 32, 0)
            state, log = train_autoencoder(ae_config(stage), x, model)
            runs.append((params_bytes(state.model), log.to_csv()))
        assert runs[0] == runs[1]
        beta = 1e-4 if stage == "vae" else 1.0
        for rec in log.records:
            c = rec.components
            recomputed = c["recon"] + beta * c["kl_or_codebook"] + c["commit"]
            assert recomputed == pytest.approx(rec.loss, rel=1e-6)
        assert "wall" not in log.to_csv()

    def test_recon_decreases(self, clips):
        _, dp = clips
        _, log = train_autoencoder(ae_config("vae", epochs=8), dp, build_vae(SPEC, 4, 0))
        assert log.records[-1].components["recon"] < log.records[0].components["recon"]

    def test_resume_is_bit_exact(self, clips, tmp_path):
        sat, _ = clips
        full, _ = train_autoencoder(ae_config("vqvae", epochs=4), sat, build_vqvae(SPEC, 2, 32, 0))
        half, _ = train_autoencoder(ae_config("vqvae", epochs=2), sat, build_vqvae(SPEC, 2, 32, 0))
        half.save(tmp_path / "half")
        resumed, _ = train_autoencoder(ae_config("vqvae", epochs=4), sat,
                                       resume=Checkpoint.load(tmp_path / "half"))
        assert params_bytes(resumed.model) == params_bytes(full.model)

    def test_non_finite_loss_aborts(self, clips):
        _, dp = clips
        bad = dp.copy()
        bad[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError, match="epoch 1"):
            train_autoencoder(ae_config("vae", epochs=1), bad, build_vae(SPEC, 4, 0))

    def test_wrong_stage(self, clips):
        with pytest.raises(ValueError):
            train_autoencoder(TrainConfig("vdit_pretrain"), clips[0], build_vae(SPEC, 4, 0))

    def test_row_shuffle_permutes_rows_only(self):
        x = torch.arange(2 * 1 * 4 * 3, dtype=torch.float32).reshape(2, 1, 4, 3)
        y = shuffle_rows(x, torch.Generator().manual_seed(0))
        for i in range(2):
            rows_x = sorted(map(tuple, x[i, 0].tolist()))
            rows_y = sorted(map(tuple, y[i, 0].tolist()))
            assert rows_x == rows_y


class TestCheckpoint:
    def test_save_load_save_identical(self, clips, tmp_path):
        state, _ = train_autoencoder(ae_config("vae", epochs=2), clips[1], build_vae(SPEC, 4, 0))
        state.extras = {"latent_mean": torch.arange(3.0)}
        state.save(tmp_path / "a", RunConfig())
        again = Checkpoint.load(tmp_path / "a")
        assert again.epoch == 2 and again.stage == "vae"
        assert torch.equal(again.extras["latent_mean"], torch.arange(3.0))
        again.save(tmp_path / "b", RunConfig())
        assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
        assert parameter_hash(again.model) == parameter_hash(state.model)

    def test_manifest_lists_moments_and_rng(self, clips, tmp_path):
        state, _ = train_autoencoder(ae_config("vae", epochs=1), clips[1], build_vae(SPEC, 4, 0))
        state.save(tmp_path / "c")
        manifest = (tmp_path / "c" / "manifest.txt").read_text()
        assert "rng" in manifest and "exp_avg_sq" in manifest and "param/" in manifest


@pytest.fixture(scope="module")
def codec_and_latents(clips):
    sat, dp = clips
    vae = build_vae(SPEC, 4, 0).eval()
    vq = build_vqvae(SPEC, 2, 32, 0).eval()
    return LatentCodec.fit(vae, vq, sat, dp)


class TestLatents:
    def test_shapes_and_repeatability(self, clips, codec_and_latents):
        sat, dp = clips
        codec, z = codec_and_latents
        assert z.shape == (4, 6, 6, 2, 4)
        assert torch.equal(codec.encode(sat, dp), z)
        raw = encode_dataset(codec.vae, codec.vqvae, sat, dp)
        assert torch.allclose(codec.unstandardize(z), raw, atol=1e-5)

    def test_standardized_statistics(self, codec_and_latents):
        _, z = codec_and_latents
        m = z.mean(dim=(0, 1, 3, 4))
        assert torch.allclose(m, torch.zeros_like(m), atol=1e-4)

    def test_decode_ranges(self, codec_and_latents):
        codec, z = codec_and_latents
        sat, dp = codec.decode(z * 10)
        assert sat.shape == (4, 6, 1, 16, 32)
        assert sat.min() >= 0 and sat.max() <= 1 and dp.min() >= -1 and dp.max() <= 1


class TestVditTraining:
    def vcfg(self, stage="vdit_pretrain", epochs=3):
        return TrainConfig(stage, epochs=epochs, batch_size=2, lr=1e-3, optimizer="adamw",
                           weight_decay=0.01, seed=2, grad_clip=1.0, frames=6, context=4)

    def test_pretrain_and_finetune(self, codec_and_latents):
        codec, z = codec_and_latents
        before = (parameter_hash(codec.vae), parameter_hash(codec.vqvae))
        state, log = train_vdit(self.vcfg(epochs=2), z, SCHED, model=build_vdit(VCFG, 0))
        assert len(log.records) == 2 and all(np.isfinite(log.losses))
        ft, flog = train_vdit(self.vcfg("vdit_finetune", 2), z, SCHED, init=state)
        assert len(flog.records) == 2
        # fine-tuning works on a copy; the pre-trained weights are untouched
        assert params_bytes(ft.model) != params_bytes(state.model)
        assert (parameter_hash(codec.vae), parameter_hash(codec.vqvae)) == before

    def test_finetune_requires_init(self, codec_and_latents):
        _, z = codec_and_latents
        with pytest.raises(TrainingError):
            train_vdit(self.vcfg("vdit_finetune"), z, SCHED)

    def test_resume_bit_exact(self, codec_and_latents, tmp_path):
        _, z = codec_and_latents
        full, flog = train_vdit(self.vcfg(epochs=4), z, SCHED, model=build_vdit(VCFG, 0))
        half, hlog = train_vdit(self.vcfg(epochs=2), z, SCHED, model=build_vdit(VCFG, 0))
        half.save(tmp_path / "h")
        res, rlog = train_vdit(self.vcfg(epochs=4), z, SCHED, resume=Checkpoint.load(tmp_path / "h"),
                               train_log=hlog)
        assert params_bytes(res.model) == params_bytes(full.model)
        assert rlog.to_csv() == flog.to_csv()


@pytest.mark.slow
def test_desk_vae_moving_average_decreases():
    cfg = RunConfig()
    ds = build_dataset(cfg.grid(), 8, 0)
    _, dp = ds.normalized(ds.split.train_ids)
    tc = cfg.train_config("vae")
    tc.epochs = 50
    _, log = train_autoencoder(tc, dp, build_vae(cfg.vae_spec(), cfg["vae.latent_channels"], 0))
    recon = np.array([r.components["recon"] for r in log.records])
    ma = np.convolve(recon, np.ones(10) / 10, mode="valid")
    assert len(recon) == 50
    assert np.all(np.diff(ma) < 0), ma
