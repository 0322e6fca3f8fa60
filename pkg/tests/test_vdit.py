import copy

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from plumeflow.vdit import (
    FULL_SCALE_CONFIG,
    TokenGrid,
    VDiT,
    VDiTConfig,
    patchify,
    sinusoidal_features,
    unpatchify,
)

TINY = VDiTConfig(in_channels=3, latent_size=(4, 6), hidden_dim=32, n_layers=2, n_heads=2,
                  head_dim=16, patch=2, t_embed_dim=16, max_frames=8)


def randomized(cfg=TINY, seed=0, dtype=torch.float32):
    """Model with every parameter (including the zero-initialized ones) randomized."""
    torch.manual_seed(seed)
    m = VDiT(cfg).to(dtype)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(0.2 * torch.randn(p.shape, generator=g, dtype=dtype))
    return m


class TestPatches:
    @pytest.mark.parametrize("hw", [(4, 8), (12, 25), (3, 7)])
    def test_round_trip(self, hw):
        z = torch.randn(2, 3, 5, *hw)
        grid = patchify(z, 2)
        assert torch.equal(unpatchify(grid, 2), z)

    def test_padding_and_token_count(self):
        grid = patchify(torch.ones(1, 1, 1, 12, 25), 2)
        assert grid.tokens.shape == (1, 1, 6 * 13, 4)
        assert (grid.pad_h, grid.pad_w) == (0, 1)
        # last patch column covers one real column and one zero pad
        assert grid.tokens[0, 0, 12].tolist() == [1.0, 0.0, 1.0, 0.0]

    def test_feature_layout(self):
        z = torch.arange(2 * 2 * 2, dtype=torch.float32).reshape(1, 1, 2, 2, 2)
        # single patch, features are (c, row, col) flattened
        assert patchify(z, 2).tokens[0, 0, 0].tolist() == list(range(8))

    @settings(max_examples=25, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9), p=st.integers(1, 3))
    def test_round_trip_property(self, h, w, p):
        z = torch.randn(1, 2, 2, h, w)
        assert torch.equal(unpatchify(patchify(z, p), p), z)

    def test_bad_token_count(self):
        grid = patchify(torch.zeros(1, 1, 1, 4, 4), 2)
        bad = TokenGrid(grid.tokens[:, :, :3], grid.pad_h, grid.pad_w, grid.orig)
        with pytest.raises(ValueError):
            unpatchify(bad, 2)


class TestTimestep:
    def test_features(self):
        f = sinusoidal_features(torch.tensor([0.0, 5.0]), 8)
        assert f.shape == (2, 8)
        assert f[0, :4].tolist() == [1.0] * 4 and f[0, 4:].tolist() == [0.0] * 4
        assert f[1, 0].item() == pytest.approx(torch.cos(torch.tensor(5.0, dtype=torch.float64)).item())

    def test_out_of_range(self):
        m = VDiT(TINY)
        z = torch.zeros(1, 2, 3, 4, 6)
        with pytest.raises(ValueError):
            m(z, torch.tensor([1001.0]))
        with pytest.raises(ValueError):
            m(z, torch.tensor([-0.5]))


class TestForward:
    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**16), frames=st.integers(1, 8))
    def test_zero_output_at_init(self, seed, frames):
        torch.manual_seed(seed)
        m = VDiT(TINY)
        z = torch.randn(2, frames, 3, 4, 6)
        out = m(z, torch.rand(2) * 1000)
        assert out.shape == z.shape
        assert out.abs().max().item() <= 1e-7

    def test_blocks_are_identity_at_init(self):
        m = VDiT(TINY)
        x = torch.randn(2, 3, 6, 32)
        cond = torch.randn(2, 32)
        for blk in m.blocks:
            assert torch.equal(blk(x, cond), x)

    def test_alternating_axes(self):
        m = VDiT(VDiTConfig(n_layers=6))
        assert [b.axis for b in m.blocks] == ["spatial", "temporal"] * 3

    def test_input_validation(self):
        m = VDiT(TINY)
        with pytest.raises(ValueError):
            m(torch.zeros(1, 2, 4, 4, 6), torch.zeros(1))
        with pytest.raises(ValueError):
            m(torch.zeros(1, 2, 3, 4, 4), torch.zeros(1))
        with pytest.raises(ValueError):
            m(torch.zeros(1, 9, 3, 4, 6), torch.zeros(1))

    def test_batch_independence(self):
        m = randomized()
        z = torch.randn(3, 4, 3, 4, 6)
        t = torch.tensor([10.0, 500.0, 900.0])
        base = m(z, t)
        z2 = z.clone()
        z2[1] += torch.randn_like(z2[1])
        out = m(z2, t)
        assert torch.allclose(out[0], base[0], atol=1e-6) and torch.allclose(out[2], base[2], atol=1e-6)
        assert not torch.allclose(out[1], base[1])

    def test_frame_permutation_equivariance_without_positions(self):
        m = randomized()
        with torch.no_grad():
            m.pos_temporal.zero_()
        z = torch.randn(1, 5, 3, 4, 6)
        t = torch.tensor([300.0])
        perm = torch.tensor([3, 0, 4, 1, 2])
        assert torch.allclose(m(z[:, perm], t), m(z, t)[:, perm], atol=1e-5)

    def test_temporal_mixing_reaches_other_frames(self):
        m = randomized()
        z = torch.randn(1, 4, 3, 4, 6)
        t = torch.tensor([250.0])
        base = m(z, t)
        z2 = z.clone()
        z2[0, 0, :, 0, 0] += 1.0  # sentinel in one patch of frame 0
        diff = (m(z2, t) - base).abs()
        assert diff[0, 3].max() > 1e-6  # temporal attention carries it forward
        # a spatial-only stack keeps the perturbation inside frame 0
        spatial = copy.deepcopy(m)
        spatial.blocks = torch.nn.ModuleList([b for b in m.blocks if b.axis == "spatial"])
        diff = (spatial(z2, t) - spatial(z, t)).abs()
        assert diff[0, 1:].max() == 0 and diff[0, 0].max() > 0

    def test_full_scale_config_size(self):
        cfg = FULL_SCALE_CONFIG
        assert cfg.hidden_dim == 512 and cfg.n_layers == 8
        assert cfg.n_heads == 8 and cfg.head_dim == 64 and cfg.t_embed_dim == 256
        assert cfg.grid == (6, 13)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            VDiTConfig(hidden_dim=100, n_heads=4, head_dim=32)
        with pytest.raises(ValueError):
            VDiTConfig(n_layers=3)


def test_gradients_match_finite_differences():
    """fp32 analytic gradients against central differences on a float64 copy."""
    m32 = randomized(seed=3)
    m64 = copy.deepcopy(m32).double()
    g = torch.Generator().manual_seed(9)
    z = torch.randn(2, 3, 3, 4, 6, generator=g)
    w = torch.randn(2, 3, 3, 4, 6, generator=g)
    t = torch.tensor([120.0, 640.0])

    def loss(model, dtype):
        return (model(z.to(dtype), t) * w.to(dtype)).sum()

    loss(m32, torch.float32).backward()
    params32 = dict(m32.named_parameters())
    params64 = dict(m64.named_parameters())
    names = sorted(params32)
    picks = torch.randint(0, 10**9, (10, 2), generator=g).tolist()
    h = 1e-6
    for k, (a, b) in enumerate(picks):
        name = names[(a + k * 7) % len(names)]
        p64 = params64[name]
        i = b % p64.numel()
        with torch.no_grad():
            orig = p64.view(-1)[i].item()
            p64.view(-1)[i] = orig + h
            up = loss(m64, torch.float64).item()
            p64.view(-1)[i] = orig - h
            down = loss(m64, torch.float64).item()
            p64.view(-1)[i] = orig
        fd = (up - down) / (2 * h)
        analytic = params32[name].grad.view(-1)[i].item()
        assert abs(analytic - fd) <= 1e-3 * abs(fd), (name, i, analytic, fd)
