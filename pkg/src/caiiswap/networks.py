"""Target encoder, upsampling generator, swap composition and PatchGAN critic."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import TARGET_SIZE, resize_image
from .errors import ConfigError, ShapeMismatch
from .fusion import CaiiConfig, FusionEncoder


@dataclass
class GeneratorConfig:
    input_resolution: int = TARGET_SIZE
    downsample_stages: int = 4
    base_channels: int = 64
    max_channels: int = 512
    norm: str = "instance"
    skip_connections: bool = False

    @property
    def bottleneck_resolution(self):
        return self.input_resolution // 2**self.downsample_stages

    def stage_channels(self):
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.downsample_stages)]

    @property
    def bottleneck_channels(self):
        return self.stage_channels()[-1]

    def validate(self):
        if self.input_resolution != TARGET_SIZE:
            raise ConfigError("generator.input_resolution", f"must be {TARGET_SIZE}")
        if self.downsample_stages < 1:
            raise ConfigError("generator.downsample_stages", "must be >= 1")
        if self.input_resolution % 2**self.downsample_stages or self.bottleneck_resolution < 4:
            raise ConfigError("generator.downsample_stages", "bottleneck must be an integer >= 4")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ConfigError("generator.base_channels", "must be >= 1 and <= max_channels")
        if self.norm not in ("instance", "none"):
            raise ConfigError("generator.norm", "must be 'instance' or 'none'")
        return self


def _norm(kind, channels):
    return nn.InstanceNorm2d(channels, affine=True) if kind == "instance" else nn.Identity()


class TargetEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        chans = [3] + cfg.stage_channels()
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1),
                _norm(cfg.norm, chans[i + 1]),
                nn.LeakyReLU(0.2),
            )
            for i in range(cfg.downsample_stages)
        )

    def forward(self, x, return_skips=False):
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, self.cfg.input_resolution, self.cfg.input_resolution):
            raise ShapeMismatch(f"target encoder expects N x 3 x 256 x 256, got {tuple(x.shape)}")
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return (x, skips[:-1]) if return_skips else x


class Decoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels()
        outs = chans[:-1][::-1] + [cfg.base_channels]
        ins = chans[::-1]
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ci, co, 3, padding=1),
                _norm(cfg.norm, co),
                nn.ReLU(),
            )
            for ci, co in zip(ins, outs)
        )
        self.to_rgb = nn.Conv2d(cfg.base_channels, 3, 3, padding=1)

    def forward(self, z, skips=None):
        b = self.cfg.bottleneck_resolution
        if z.dim() != 4 or tuple(z.shape[1:]) != (self.cfg.bottleneck_channels, b, b):
            raise ShapeMismatch(
                f"generator expects N x {self.cfg.bottleneck_channels} x {b} x {b}, got {tuple(z.shape)}"
            )
        skips = list(skips or [])
        for stage in self.stages:
            z = stage(z)
            if skips:
                z = z + skips.pop()
        return torch.tanh(self.to_rgb(z))


class SwapModel(nn.Module):
    """Target encoder -> fusion stack -> decoder, conditioned on a frozen identity encoder.

    The identity encoder is held as a plain attribute: it is not a
    submodule, so it never reaches the optimizer or the checkpoint.
    """

    def __init__(self, gen_cfg, fusion_cfg, identity_encoder, id_dim=None):
        super().__init__()
        gen_cfg.validate()
        self.gen_cfg = gen_cfg
        id_dim = id_dim or getattr(identity_encoder, "dim", 512)
        if not fusion_cfg.channels:
            fusion_cfg.channels = [gen_cfg.bottleneck_channels] * fusion_cfg.num_blocks
        if set(fusion_cfg.channels) != {gen_cfg.bottleneck_channels}:
            raise ConfigError("fusion.channels", f"must equal the bottleneck width {gen_cfg.bottleneck_channels}")
        self.target_encoder = TargetEncoder(gen_cfg)
        self.fusion = FusionEncoder(fusion_cfg, gen_cfg.bottleneck_resolution, id_dim)
        self.decoder = Decoder(gen_cfg)
        self.__dict__["identity_encoder"] = identity_encoder

    @property
    def identity_size(self):
        return self.identity_encoder.input_size

    def identity_code(self, x_s):
        if x_s.requires_grad:
            return self.identity_encoder(x_s)
        with torch.no_grad():
            return self.identity_encoder(x_s)

    def forward(self, x_s, x_t, c_s=None):
        if c_s is None:
            c_s = self.identity_code(x_s)
        c_s = c_s.to(x_t.dtype)
        if self.gen_cfg.skip_connections:
            z_t, skips = self.target_encoder(x_t, return_skips=True)
            return self.decoder(self.fusion(z_t, c_s), skips)
        return self.decoder(self.fusion(self.target_encoder(x_t), c_s))


def encode_target(x_t, model):
    return model.target_encoder(x_t)


def generate(z_bar, model):
    return model.decoder(z_bar)


def swap(x_s, x_t, model):
    if x_s.shape[-1] != model.identity_size:
        raise ShapeMismatch(f"source must be {model.identity_size} px, got {x_s.shape[-1]}")
    return model(x_s, x_t)


def reswap_cycle(x_ts, x_t, model):
    """Re-swap: the swapped image is the target, the original target is the source."""
    return model(resize_image(x_t, model.identity_size), x_ts)


# ---------------------------------------------------------------------------
# discriminator


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64
    n_layers: int = 3
    norm: str = "batch"
    spectral_norm: bool = False

    def validate(self):
        if self.n_layers < 1 or self.base_channels < 1:
            raise ConfigError("discriminator", "n_layers and base_channels must be >= 1")
        if self.norm not in ("batch", "none"):
            raise ConfigError("discriminator.norm", "must be 'batch' or 'none'")
        return self


def patch_output_size(size, n_layers=3):
    """Spatial size of the logit map: n strided 4x4 convs, then two stride-1 4x4 convs."""
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = (size + 2 - 4) // 1 + 1
    return size


def patch_receptive_field(n_layers=3):
    rf = 1
    for _ in range(2):
        rf = rf + 3
    for _ in range(n_layers):
        rf = rf * 2 + 2
    return rf


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = (cfg or DiscriminatorConfig()).validate()
        self.cfg = cfg
        sn = nn.utils.spectral_norm if cfg.spectral_norm else (lambda m: m)

        def norm(c):
            return nn.BatchNorm2d(c) if cfg.norm == "batch" else nn.Identity()

        nf = cfg.base_channels
        layers = [sn(nn.Conv2d(3, nf, 4, stride=2, padding=1)), nn.LeakyReLU(0.2)]
        for i in range(1, cfg.n_layers):
            nf_prev, nf = nf, min(nf * 2, cfg.base_channels * 8)
            layers += [sn(nn.Conv2d(nf_prev, nf, 4, stride=2, padding=1)), norm(nf), nn.LeakyReLU(0.2)]
        nf_prev, nf = nf, min(nf * 2, cfg.base_channels * 8)
        layers += [sn(nn.Conv2d(nf_prev, nf, 4, stride=1, padding=1)), norm(nf), nn.LeakyReLU(0.2)]
        layers += [sn(nn.Conv2d(nf, 1, 4, stride=1, padding=1))]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"discriminator expects N x 3 x H x W, got {tuple(x.shape)}")
        return self.net(x)


def discriminate(image, discriminator):
    return discriminator(image if image.dim() == 4 else image[None])


__all__ = [
    "CaiiConfig",
    "DiscriminatorConfig",
    "GeneratorConfig",
    "PatchDiscriminator",
    "SwapModel",
    "discriminate",
    "encode_target",
    "generate",
    "patch_output_size",
    "patch_receptive_field",
    "reswap_cycle",
    "swap",
]
