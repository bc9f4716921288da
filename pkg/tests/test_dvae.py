import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dyngrain import oracles
from dyngrain.dvae import DVAE, FactorLadder, dvae_loss, grain_mask, kl_used_cells, mix_latents, reparameterize, upsample_nearest
from dyngrain.tensor import Rng, ShapeError

LADDER = FactorLadder((4, 8), 4)


def test_ladder_validation_and_grids():
    assert LADDER.k == 2 and LADDER.region_size == 8
    assert LADDER.grid(64, 64, 1) == (16, 16) and LADDER.grid(64, 64, 2) == (8, 8)
    for bad in ((8, 4), (4, 4), (), (0, 4)):
        with pytest.raises(ValueError):
            FactorLadder(bad, 4)
    FactorLadder((4, 6), 4)  # non-nested factors are legal
    with pytest.raises(ValueError):
        LADDER.check_image(60, 64)


@given(st.integers(0, 2**31 - 1))
def test_mix_matches_cellwise_oracle(seed):
    gen = np.random.default_rng(seed)
    g = np.where(gen.random((2, 8, 8)) < gen.random(), 1, 2)
    z1 = gen.standard_normal((2, 4, 16, 16)).astype(np.float32)
    z2 = gen.standard_normal((2, 4, 8, 8)).astype(np.float32)
    mix = mix_latents([torch.from_numpy(z1), torch.from_numpy(z2)], torch.from_numpy(g), LADDER)
    for b in range(2):
        assert np.array_equal(mix.latent[b].numpy(), oracles.neighbor_copy(z2[b], z1[b], g[b]))


def test_all_fine_is_z1_bitwise_and_all_coarse_is_z2_upsampled():
    z1, z2 = torch.randn(2, 4, 16, 16), torch.randn(2, 4, 8, 8)
    fine = mix_latents([z1, z2], torch.ones(2, 8, 8, dtype=torch.long), LADDER).latent
    coarse = mix_latents([z1, z2], torch.full((2, 8, 8), 2), LADDER).latent
    assert torch.equal(fine, z1)
    assert torch.equal(coarse, upsample_nearest(z2, 2))


def test_three_level_mix():
    ladder = FactorLadder((2, 4, 8), 2)
    z = [torch.randn(1, 2, 32, 32), torch.randn(1, 2, 16, 16), torch.randn(1, 2, 8, 8)]
    g = torch.tensor([[[1, 2, 3] * 2 + [1, 2]] * 8])
    out = mix_latents(z, g, ladder).latent
    assert torch.equal(out[..., :4, :4], z[0][..., :4, :4])
    assert torch.equal(out[..., :4, 4:8], upsample_nearest(z[1], 2)[..., :4, 4:8])
    assert torch.equal(out[..., :4, 8:12], upsample_nearest(z[2], 4)[..., :4, 8:12])


def test_mix_shape_errors():
    with pytest.raises(ShapeError):
        mix_latents([torch.randn(1, 4, 16, 16)], torch.ones(1, 8, 8, dtype=torch.long), LADDER)
    with pytest.raises(ShapeError):
        mix_latents([torch.randn(1, 4, 16, 16), torch.randn(1, 4, 8, 8)], torch.ones(1, 4, 4, dtype=torch.long), LADDER)


def test_reparameterize():
    m, lv = torch.zeros(2, 3), torch.zeros(2, 3)
    assert torch.equal(reparameterize(m, lv, None), m)
    assert torch.equal(reparameterize(m, lv, Rng(0), deterministic=True), m)
    a = reparameterize(m, lv, Rng(0, "z"))
    assert torch.equal(a, Rng(0, "z").normal(2, 3))
    with pytest.raises(ShapeError):
        reparameterize(m, torch.zeros(3, 2), None)


def test_dvae_shapes_and_determinism():
    torch.manual_seed(0)
    model = DVAE(LADDER, (8, 16))
    x = torch.rand(2, 3, 64, 64)
    stats = model.encode(x)
    assert [tuple(m.shape) for m, _ in stats] == [(2, 4, 16, 16), (2, 4, 8, 8)]
    g = torch.ones(2, 8, 8, dtype=torch.long)
    recon, _, mix = model(x, g, deterministic=True)
    assert recon.shape == x.shape and mix.latent.shape == (2, 4, 16, 16)
    recon2, _, _ = model(x, g, deterministic=True)
    assert torch.equal(recon, recon2)


def test_decoder_grain_channels():
    model = DVAE(LADDER, (8, 16), grain_input=True)
    z = torch.randn(1, 4, 16, 16)
    with pytest.raises(ValueError):
        model.decode(z)
    a = model.decode(z, torch.ones(1, 8, 8, dtype=torch.long))
    b = model.decode(z, torch.full((1, 8, 8), 2))
    assert not torch.equal(a, b)


def test_kl_counts_only_selected_cells():
    m1, lv1 = torch.randn(1, 4, 16, 16), torch.randn(1, 4, 16, 16)
    m2, lv2 = torch.randn(1, 4, 8, 8), torch.randn(1, 4, 8, 8)
    g = torch.full((1, 8, 8), 2)
    g[0, :4] = 1
    kl = lambda m, lv: 0.5 * (m**2 + lv.exp() - 1 - lv)
    total = kl(m1, lv1)[..., :8, :].sum() + kl(m2, lv2)[..., 4:, :].sum()
    cells = 8 * 16 + 4 * 8
    torch.testing.assert_close(kl_used_cells([(m1, lv1), (m2, lv2)], g), total / cells)
    # garbage in unused cells does not matter
    m2b = m2.clone()
    m2b[..., :4, :] = 1e3
    torch.testing.assert_close(kl_used_cells([(m1, lv1), (m2b, lv2)], g), total / cells)


def test_grain_mask_shape():
    g = torch.tensor([[[1, 2], [2, 1]]])
    m = grain_mask(g, 1, (4, 4))
    assert m.shape == (1, 4, 4) and m.sum() == 8


def test_dvae_loss_reduces_to_mse():
    x, r = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    stats = [(torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2)), (torch.randn(1, 4, 1, 1), torch.randn(1, 4, 1, 1))]
    g = torch.ones(1, 1, 1, dtype=torch.long)
    assert dvae_loss(x, r, stats, g, kl_weight=0) == torch.nn.functional.mse_loss(r, x)
    assert dvae_loss(x, r, stats, g, kl_weight=1.0) > dvae_loss(x, r, stats, g, kl_weight=0)
