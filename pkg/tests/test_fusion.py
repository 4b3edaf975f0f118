import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from caiiswap.errors import ChannelMismatch, ConfigError, ConfigMismatch, IndexOutOfRange, ShapeMismatch
from caiiswap.fusion import (
    EPS,
    CaiiBlock,
    CaiiConfig,
    FusionEncoder,
    adain,
    caii_forward,
    channel_stats,
    fusion_encode,
    map_identity,
    unidirectional_forward,
)

from fd import max_rel_err

seeds = st.integers(0, 2**31 - 1)


def _rand(*shape, seed=0, dtype=torch.float64):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# -- channel_stats ----------------------------------------------------------------


def test_constant_map_stats():
    mean, std = channel_stats(torch.full((3, 5, 5), 3.0, dtype=torch.float64))
    torch.testing.assert_close(mean, torch.full((3,), 3.0, dtype=torch.float64))
    torch.testing.assert_close(std, torch.full((3,), EPS, dtype=torch.float64))


def test_two_by_two_stats_match_numpy():
    x = torch.tensor([[[1.0, 1.0], [3.0, 3.0]]], dtype=torch.float64)
    mean, std = channel_stats(x)
    arr = x.numpy()[0]
    assert float(mean) == pytest.approx(2.0) == pytest.approx(arr.mean())
    assert float(std) == pytest.approx(1.0) == pytest.approx(arr.std(ddof=0))


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_stats_invariant_under_spatial_permutation(seed):
    x = _rand(4, 6, 6, seed=seed)
    perm = torch.randperm(36, generator=torch.Generator().manual_seed(seed))
    y = x.reshape(4, 36)[:, perm].reshape(4, 6, 6)
    for a, b in zip(channel_stats(x), channel_stats(y)):
        torch.testing.assert_close(a, b)


def test_constant_channel_has_finite_zero_gradient():
    x = torch.full((1, 2, 4, 4), 0.7, dtype=torch.float64, requires_grad=True)
    channel_stats(x)[1].sum().backward()
    assert torch.isfinite(x.grad).all() and float(x.grad.abs().max()) == 0.0


# -- adain --------------------------------------------------------------------------


def test_adain_self_style_is_identity():
    x = _rand(2, 4, 8, 8)
    torch.testing.assert_close(adain(x, x), x, atol=1e-5, rtol=0)


def test_adain_transfers_constructed_moments():
    x = _rand(1, 3, 8, 8, seed=1)
    x = (x - x.mean((-2, -1), keepdim=True)) / x.std((-2, -1), unbiased=False, keepdim=True)
    mu, sigma = torch.tensor([0.5, -2.0, 4.0], dtype=torch.float64), torch.tensor([0.1, 2.0, 3.0], dtype=torch.float64)
    style = _rand(1, 3, 8, 8, seed=2)
    style = (style - style.mean((-2, -1), keepdim=True)) / style.std((-2, -1), unbiased=False, keepdim=True)
    style = style * sigma[:, None, None] + mu[:, None, None]
    m, s = channel_stats(adain(x, style))
    torch.testing.assert_close(m[0], mu, atol=1e-5, rtol=0)
    torch.testing.assert_close(s[0], sigma, atol=1e-5, rtol=0)


def test_adain_affine_invariance_fixed_constants():
    x, s = _rand(1, 4, 8, 8, seed=3), _rand(1, 4, 8, 8, seed=4)
    torch.testing.assert_close(adain(2.5 * x - 1.0, s), adain(x, s), atol=1e-5, rtol=0)


@settings(max_examples=50, deadline=None)
@given(seed=seeds, c=st.integers(1, 6), hw=st.integers(2, 9))
def test_adain_moment_matching_property(seed, c, hw):
    x = _rand(2, c, hw, hw, seed=seed)
    s = _rand(2, c, hw, hw, seed=seed + 1) * 3 + 1
    m, sd = channel_stats(adain(x, s))
    sm, ssd = channel_stats(s)
    torch.testing.assert_close(m, sm, atol=1e-5, rtol=0)
    torch.testing.assert_close(sd, ssd, atol=1e-5, rtol=0)


@settings(max_examples=50, deadline=None)
@given(seed=seeds, a=st.floats(0.1, 10.0), b=st.floats(-5.0, 5.0))
def test_adain_affine_invariance_property(seed, a, b):
    x, s = _rand(1, 3, 6, 6, seed=seed), _rand(1, 3, 6, 6, seed=seed + 7)
    scale = torch.tensor([a, 1.0, 0.5 * a], dtype=torch.float64)[:, None, None]
    shift = torch.tensor([b, -b, 0.0], dtype=torch.float64)[:, None, None]
    torch.testing.assert_close(adain(scale * x + shift, s), adain(x, s), atol=1e-5, rtol=0)


def test_adain_channel_mismatch():
    with pytest.raises(ChannelMismatch):
        adain(torch.zeros(1, 3, 4, 4), torch.zeros(1, 4, 4, 4))


# -- identity mapping -------------------------------------------------------------------


def _fusion(num_blocks=2, channels=4, spatial=8, id_dim=16, mode="caii", grid=4):
    torch.manual_seed(0)
    cfg = CaiiConfig(num_blocks=num_blocks, channels=[channels] * num_blocks, injection_mode=mode, phi_grid=grid)
    return FusionEncoder(cfg, spatial, id_dim).double()


def test_map_identity_shape_and_distinctness():
    f = _fusion()
    a, b = _rand(16, seed=1), _rand(16, seed=2)
    sa, sb = map_identity(a, 0, f), map_identity(b, 0, f)
    assert sa.shape == (1, 4, 8, 8)
    assert not torch.allclose(sa, sb)
    assert not torch.allclose(map_identity(a, 0, f), map_identity(a, 1, f))  # independent phi per block


def test_map_identity_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        map_identity(_rand(16), 2, _fusion())


def test_map_identity_parameter_gradients_match_finite_differences():
    f = _fusion()
    phi = f.blocks[0].phi
    c = _rand(2, 16, seed=5)
    w = _rand(2, 4, 8, 8, seed=6)
    params = dict(phi.named_parameters())
    for name, p in params.items():
        def fn(value, name=name):
            return (torch.func.functional_call(phi, {**params, name: value}, (c,)) * w).sum()

        assert max_rel_err(fn, p.detach().clone()) < 1e-3, name


# -- CAII block ---------------------------------------------------------------------------


def _block(mode="caii", channels=4, spatial=8, id_dim=16, seed=0):
    torch.manual_seed(seed)
    return CaiiBlock(channels, spatial, id_dim, mode).double()


def test_block_preserves_shape():
    b = _block()
    z, c = _rand(2, 4, 8, 8), _rand(2, 16)
    assert caii_forward(z, c, b).shape == z.shape
    assert unidirectional_forward(z, c, b).shape == z.shape
    assert caii_forward(z[0], c[0], b).shape == z[0].shape


def test_zero_conv_gives_injected_style_only():
    b = _block()
    with torch.no_grad():
        b.conv.weight.zero_()
        b.conv.bias.zero_()
    z, c = _rand(2, 4, 8, 8, seed=1), _rand(2, 16, seed=2)
    zn = b.bn(z)  # same batch statistics the block will see
    style = b.phi(c)
    expected = adain(style, zn) + style
    torch.testing.assert_close(caii_forward(z, c, b), expected)


def test_block_rejects_bad_shapes():
    b = _block()
    with pytest.raises(ShapeMismatch):
        b(_rand(2, 3, 8, 8), _rand(2, 16))
    with pytest.raises(ShapeMismatch):
        b(_rand(2, 4, 8, 8), _rand(3, 16))


def test_caii_equals_twice_unidirectional_for_matched_statistics():
    # If BN(z_t) already has phi(c_s)'s per-channel statistics, AdaIN(phi, BN(z_t)) == phi,
    # so caii injects 2*phi and the block output is exactly twice the unidirectional one.
    b = _block().eval()
    c = _rand(1, 16, seed=3)
    with torch.no_grad():
        style = b.phi(c)
        target = adain(_rand(1, 4, 8, 8, seed=4), style)  # random content, phi's moments
        z = target * torch.sqrt(b.bn.running_var + b.bn.eps)[:, None, None] + b.bn.running_mean[:, None, None]
        torch.testing.assert_close(adain(style, b.bn(z)), style, atol=1e-8, rtol=0)
        caii, uni = caii_forward(z, c, b), unidirectional_forward(z, c, b)
    torch.testing.assert_close(caii, 2 * uni, atol=1e-4, rtol=0)


def test_caii_and_unidirectional_differ_on_random_inputs():
    b = _block()
    z, c = _rand(2, 4, 8, 8, seed=8), _rand(2, 16, seed=9)
    with torch.no_grad():
        assert float((caii_forward(z, c, b) - unidirectional_forward(z, c, b)).abs().max()) > 1e-6


def test_block_outputs_finite_on_constant_channels():
    b = _block()
    z = torch.ones(2, 4, 8, 8, dtype=torch.float64)
    assert torch.isfinite(caii_forward(z, _rand(2, 16), b)).all()


@pytest.mark.parametrize("mode", ["caii", "unidirectional"])
def test_block_gradients_match_finite_differences(mode):
    b = _block(mode)
    z, c = _rand(2, 4, 8, 8, seed=10), _rand(2, 16, seed=11)
    w = _rand(2, 4, 8, 8, seed=12)
    assert max_rel_err(lambda x: (b(x, c) * w).sum(), z) < 1e-3
    assert max_rel_err(lambda x: (b(z, x) * w).sum(), c) < 1e-3
    params = dict(b.named_parameters())
    for name, p in params.items():
        def fn(value, name=name):
            return (torch.func.functional_call(b, {**params, name: value}, (z, c)) * w).sum()

        assert max_rel_err(fn, p.detach().clone()) < 1e-3, name


# -- stacked encoder ---------------------------------------------------------------------------


def test_single_block_stack_equals_block():
    f = _fusion(num_blocks=1)
    z, c = _rand(2, 4, 8, 8), _rand(2, 16)
    torch.testing.assert_close(fusion_encode(z, c, f), caii_forward(z, c, f.blocks[0]))


def test_stack_preserves_shape_and_mode_switch_changes_output():
    f = _fusion(num_blocks=3)
    z, c = _rand(2, 4, 8, 8), _rand(2, 16)
    a = fusion_encode(z, c, f)
    assert a.shape == z.shape
    f.set_injection_mode("unidirectional")
    assert not torch.allclose(a, fusion_encode(z, c, f))


def test_stack_rejects_mismatched_input():
    with pytest.raises(ConfigMismatch):
        fusion_encode(_rand(2, 5, 8, 8), _rand(2, 16), _fusion())


def test_config_validation():
    with pytest.raises(ConfigError):
        CaiiConfig(num_blocks=0, channels=[]).validate()
    with pytest.raises(ConfigError):
        CaiiConfig(num_blocks=2, channels=[4]).validate()
    with pytest.raises(ConfigError):
        CaiiConfig(num_blocks=1, channels=[4], injection_mode="both").validate()


def test_spatially_constant_phi_is_available():
    f = _fusion(grid=1)
    s = map_identity(_rand(16), 0, f)
    assert float(s.detach().std(dim=(-2, -1)).max()) == 0.0
