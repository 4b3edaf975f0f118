import pytest
import torch

from caiiswap.errors import ConfigError, ShapeMismatch
from caiiswap.fusion import CaiiConfig
from caiiswap.networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    PatchDiscriminator,
    SwapModel,
    discriminate,
    encode_target,
    generate,
    patch_output_size,
    patch_receptive_field,
    reswap_cycle,
    swap,
)

from fd import directional_rel_err, max_rel_err


def _img(n, size, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g, dtype=dtype) * 2 - 1


def _model(suite, stages=4, base=4, max_ch=16, skips=False, norm="instance"):
    torch.manual_seed(0)
    gen = GeneratorConfig(downsample_stages=stages, base_channels=base, max_channels=max_ch, skip_connections=skips, norm=norm)
    return SwapModel(gen, CaiiConfig(num_blocks=2, phi_grid=4), suite.identity)


# -- config --------------------------------------------------------------------------


def test_generator_config_bottleneck():
    assert GeneratorConfig().bottleneck_resolution == 16
    assert GeneratorConfig(downsample_stages=6).validate().bottleneck_resolution == 4
    with pytest.raises(ConfigError):
        GeneratorConfig(downsample_stages=7).validate()  # 2x2 bottleneck
    with pytest.raises(ConfigError):
        GeneratorConfig(downsample_stages=0).validate()


def test_fusion_width_must_match_bottleneck(suite):
    gen = GeneratorConfig(base_channels=4, max_channels=16)
    with pytest.raises(ConfigError):
        SwapModel(gen, CaiiConfig(num_blocks=1, channels=[8]), suite.identity)


# -- target encoder / generator --------------------------------------------------------


def test_encode_target_shape_and_determinism(suite):
    m = _model(suite).eval()
    x = _img(2, 256)
    z = encode_target(x, m)
    assert z.shape == (2, 16, 16, 16)
    assert torch.equal(z, encode_target(x, m))


def test_encode_target_rejects_wrong_size(suite):
    with pytest.raises(ShapeMismatch):
        encode_target(_img(1, 128), _model(suite))


def test_generate_shape_range_and_determinism(suite):
    m = _model(suite).eval()
    z = 50 * torch.randn(2, 16, 16, 16, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        y = generate(z, m)
    assert y.shape == (2, 3, 256, 256)
    assert float(y.abs().max()) <= 1.0
    assert torch.equal(y, generate(z, m))


def test_generate_rejects_wrong_bottleneck(suite):
    with pytest.raises(ShapeMismatch):
        generate(torch.zeros(1, 16, 8, 8), _model(suite))


def _tiny_double(suite):
    # two stages of eight channels; a 64x64 bottleneck keeps float64 FD affordable
    return _model(suite, stages=2, base=8, max_ch=8).double()


def test_encoder_gradients_match_finite_differences(suite):
    m = _tiny_double(suite)
    x = _img(1, 256, seed=2, dtype=torch.float64) * 0.9
    w = torch.randn(1, 8, 64, 64, generator=torch.Generator().manual_seed(3), dtype=torch.float64)

    def fn(inp):
        return (encode_target(inp, m) * w).sum()

    assert directional_rel_err(fn, x, n_dirs=3) < 1e-3
    coords = torch.randint(0, x.numel(), (8,), generator=torch.Generator().manual_seed(4)).tolist()
    assert max_rel_err(fn, x, coords=coords) < 1e-3


def test_generator_gradients_match_finite_differences(suite):
    m = _tiny_double(suite)
    z = torch.randn(1, 8, 64, 64, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    w = torch.randn(1, 3, 256, 256, generator=torch.Generator().manual_seed(6), dtype=torch.float64)

    def fn(inp):
        return (generate(inp, m) * w).sum()

    assert directional_rel_err(fn, z, n_dirs=3) < 1e-3
    coords = torch.randint(0, z.numel(), (8,), generator=torch.Generator().manual_seed(7)).tolist()
    assert max_rel_err(fn, z, coords=coords) < 1e-3


# -- swap composition -------------------------------------------------------------------


def test_swap_is_the_composition(suite):
    m = _model(suite).eval()
    x_s, x_t = _img(2, 112, 1), _img(2, 256, 2)
    with torch.no_grad():
        c_s = suite.identity(x_s)
        expected = generate(m.fusion(encode_target(x_t, m), c_s), m)
        out = swap(x_s, x_t, m)
    assert out.shape == (2, 3, 256, 256) and float(out.abs().max()) <= 1.0
    torch.testing.assert_close(out, expected)
    torch.testing.assert_close(out, swap(x_s, x_t, m), rtol=0, atol=0)


def test_swap_rejects_wrong_source_size(suite):
    with pytest.raises(ShapeMismatch):
        swap(_img(1, 256), _img(1, 256), _model(suite))


def test_source_changes_output(suite):
    m = _model(suite).eval()
    x_t = _img(1, 256, 2)
    with torch.no_grad():
        a, b = swap(_img(1, 112, 3), x_t, m), swap(_img(1, 112, 4), x_t, m)
    assert float((a - b).abs().max()) > 1e-6


def test_reswap_cycle_contract(suite):
    from caiiswap.data import resize_image

    m = _model(suite).eval()
    x_ts, x_t = _img(2, 256, 5), _img(2, 256, 6)
    with torch.no_grad():
        out = reswap_cycle(x_ts, x_t, m)
        expected = swap(resize_image(x_t, 112), x_ts, m)
    assert out.shape == (2, 3, 256, 256) and float(out.abs().max()) <= 1.0
    torch.testing.assert_close(out, expected, rtol=0, atol=0)
    torch.testing.assert_close(out, reswap_cycle(x_ts, x_t, m), rtol=0, atol=0)


def test_skip_connections_are_optional(suite):
    m = _model(suite, skips=True).eval()
    with torch.no_grad():
        y = swap(_img(1, 112), _img(1, 256), m)
    assert y.shape == (1, 3, 256, 256)


def test_every_trainable_parameter_gets_a_finite_nonzero_gradient(suite):
    m = _model(suite)
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=4))
    x_s, x_t = _img(2, 112, 1), _img(2, 256, 2)
    y = swap(x_s, x_t, m)
    loss = (y - x_t).abs().mean() + reswap_cycle(y, x_t, m).sub(x_t).abs().mean() + d(y).pow(2).mean()
    loss.backward()
    for name, p in m.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
        assert float(p.grad.abs().max()) > 0, name
    # the identity encoder is frozen and not a submodule
    assert all(not p.requires_grad for p in suite.identity.parameters())
    assert not any("identity_encoder" in n for n, _ in m.named_parameters())


# -- discriminator -----------------------------------------------------------------------


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def test_patch_output_size_matches_conv_arithmetic():
    size = 256
    for _ in range(3):
        size = _conv_out(size, 4, 2, 1)
    for _ in range(2):
        size = _conv_out(size, 4, 1, 1)
    assert size == 30 == patch_output_size(256, 3)


def test_discriminator_default_logit_map():
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=4)).eval()
    out = discriminate(_img(1, 256)[0], d)
    assert out.shape == (1, 1, 30, 30) and torch.isfinite(out).all()
    for n in (1, 2, 4):
        assert PatchDiscriminator(DiscriminatorConfig(base_channels=2, n_layers=n)).eval()(
            _img(1, 128)
        ).shape[-1] == patch_output_size(128, n)


def test_receptive_field_is_seventy_by_gradient_support():
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=2, norm="none")).double()
    x = _img(1, 256, dtype=torch.float64).requires_grad_(True)
    d(x)[0, 0, 15, 15].backward()
    support = x.grad.abs().sum((0, 1)) > 0
    rows = support.any(1).nonzero().flatten()
    cols = support.any(0).nonzero().flatten()
    assert int(rows[-1] - rows[0] + 1) == int(cols[-1] - cols[0] + 1) == 70 == patch_receptive_field(3)


def test_discriminator_translation_covariance():
    d = PatchDiscriminator(DiscriminatorConfig(base_channels=4)).eval()
    x = _img(1, 256, 3)
    shifted = torch.roll(x, shifts=8, dims=-1)  # one cell = total stride 2**3
    with torch.no_grad():
        a, b = d(x)[0, 0], d(shifted)[0, 0]
    # cells whose receptive field avoids both the wrapped columns and the zero padding
    torch.testing.assert_close(b[:, 10:20], a[:, 9:19], atol=1e-4, rtol=0)


def test_discriminator_rejects_bad_channels():
    with pytest.raises(ShapeMismatch):
        PatchDiscriminator()(torch.zeros(1, 1, 64, 64))
    with pytest.raises(ConfigError):
        DiscriminatorConfig(norm="layer").validate()
