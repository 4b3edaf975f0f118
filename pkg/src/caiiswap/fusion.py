"""AdaIN, identity mapping and cross-adaptive identity injection blocks."""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ChannelMismatch, ConfigError, ConfigMismatch, IndexOutOfRange, ShapeMismatch

EPS = 1e-5
INJECTION_MODES = ("caii", "unidirectional")


def channel_stats(x, eps=EPS):
    """Per-channel spatial mean and population std (floored at ``eps``).

    Works on C x H x W or N x C x H x W. The floor is applied to the variance
    so constant channels get std == eps with a zero (not NaN) gradient.
    """
    mean = x.mean(dim=(-2, -1))
    var = x.var(dim=(-2, -1), unbiased=False)
    return mean, var.clamp_min(eps * eps).sqrt()


def adain(content, style, eps=EPS):
    if content.shape[-3] != style.shape[-3]:
        raise ChannelMismatch(f"content has {content.shape[-3]} channels, style has {style.shape[-3]}")
    c_mean, c_std = channel_stats(content, eps)
    s_mean, s_std = channel_stats(style, eps)
    c_mean, c_std = c_mean[..., None, None], c_std[..., None, None]
    s_mean, s_std = s_mean[..., None, None], s_std[..., None, None]
    return s_std * (content - c_mean) / c_std + s_mean


@dataclass
class CaiiConfig:
    num_blocks: int = 6
    channels: list = field(default_factory=list)
    injection_mode: str = "caii"
    phi_grid: int = 4

    def validate(self):
        if self.num_blocks < 1:
            raise ConfigError("fusion.num_blocks", "must be >= 1")
        if len(self.channels) != self.num_blocks:
            raise ConfigError("fusion.channels", f"expected {self.num_blocks} entries, got {len(self.channels)}")
        if len(set(self.channels)) != 1:
            raise ConfigMismatch("fusion.channels", "all blocks must share the bottleneck channel count")
        if self.injection_mode not in INJECTION_MODES:
            raise ConfigError("fusion.injection_mode", f"must be one of {INJECTION_MODES}")
        if self.phi_grid < 1:
            raise ConfigError("fusion.phi_grid", "must be >= 1")
        return self


class IdentityMapper(nn.Module):
    """Per-block map from an identity code to a C x H x W style feature.

    A linear layer emits a ``grid`` x ``grid`` map per channel which is
    bilinearly upsampled to the block resolution. ``grid == 1`` degenerates to
    a spatially constant style.
    """

    def __init__(self, id_dim, channels, spatial, grid=4):
        super().__init__()
        self.channels = channels
        self.spatial = spatial
        self.grid = min(grid, spatial)
        self.linear = nn.Linear(id_dim, channels * self.grid * self.grid)

    def forward(self, c_s):
        s = self.linear(c_s).view(-1, self.channels, self.grid, self.grid)
        if self.grid != self.spatial:
            s = F.interpolate(s, size=(self.spatial, self.spatial), mode="bilinear", align_corners=False)
        return s


class CaiiBlock(nn.Module):
    def __init__(self, channels, spatial, id_dim=512, injection_mode="caii", phi_grid=4):
        super().__init__()
        if injection_mode not in INJECTION_MODES:
            raise ConfigError("fusion.injection_mode", f"must be one of {INJECTION_MODES}")
        self.channels = channels
        self.spatial = spatial
        self.injection_mode = injection_mode
        self.bn = nn.BatchNorm2d(channels)
        self.phi = IdentityMapper(id_dim, channels, spatial, phi_grid)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def check(self, z_t, c_s):
        if z_t.dim() != 4 or tuple(z_t.shape[1:]) != (self.channels, self.spatial, self.spatial):
            raise ShapeMismatch(
                f"block expects N x {self.channels} x {self.spatial} x {self.spatial}, got {tuple(z_t.shape)}"
            )
        if c_s.dim() != 2 or c_s.shape[0] != z_t.shape[0] or c_s.shape[1] != self.phi.linear.in_features:
            raise ShapeMismatch(f"identity code shape {tuple(c_s.shape)} incompatible with batch/id_dim")

    def forward(self, z_t, c_s, mode=None):
        mode = mode or self.injection_mode
        self.check(z_t, c_s)
        z = self.bn(z_t)
        style = self.phi(c_s)
        zt_hat = F.relu(self.conv(adain(z, style)))
        if mode == "caii":
            zs_hat = adain(style, z) + style
        elif mode == "unidirectional":
            zs_hat = style
        else:
            raise ConfigError("fusion.injection_mode", f"must be one of {INJECTION_MODES}")
        return zt_hat * zs_hat + zs_hat


class FusionEncoder(nn.Module):
    def __init__(self, config, spatial, id_dim=512):
        super().__init__()
        self.config = config.validate()
        self.blocks = nn.ModuleList(
            CaiiBlock(c, spatial, id_dim, config.injection_mode, config.phi_grid) for c in config.channels
        )

    @property
    def injection_mode(self):
        return self.config.injection_mode

    def set_injection_mode(self, mode):
        if mode not in INJECTION_MODES:
            raise ConfigError("fusion.injection_mode", f"must be one of {INJECTION_MODES}")
        self.config.injection_mode = mode
        for b in self.blocks:
            b.injection_mode = mode

    def forward(self, z_t, c_s):
        if z_t.dim() != 4 or z_t.shape[1] != self.blocks[0].channels:
            raise ConfigMismatch("fusion.channels", f"input {tuple(z_t.shape)} does not match the first block")
        for block in self.blocks:
            z_t = block(z_t, c_s)
        return z_t


def _batched(z_t, c_s):
    squeeze = z_t.dim() == 3
    if squeeze:
        z_t = z_t[None]
    if c_s.dim() == 1:
        c_s = c_s[None]
    return z_t, c_s, squeeze


def map_identity(c_s, block_index, fusion):
    if not 0 <= block_index < len(fusion.blocks):
        raise IndexOutOfRange(f"block {block_index} outside 0..{len(fusion.blocks) - 1}")
    return fusion.blocks[block_index].phi(c_s if c_s.dim() == 2 else c_s[None])


def caii_forward(z_t, c_s, block):
    z_t, c_s, squeeze = _batched(z_t, c_s)
    out = block(z_t, c_s, mode="caii")
    return out[0] if squeeze else out


def unidirectional_forward(z_t, c_s, block):
    z_t, c_s, squeeze = _batched(z_t, c_s)
    out = block(z_t, c_s, mode="unidirectional")
    return out[0] if squeeze else out


def fusion_encode(z_t, c_s, fusion):
    z_t, c_s, squeeze = _batched(z_t, c_s)
    out = fusion(z_t, c_s)
    return out[0] if squeeze else out
