"""Residual blocks, channel attention, residual groups and back-projection units."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

PROJECTION_GEOMETRY = {2: (6, 2, 2), 4: (8, 4, 2), 8: (12, 8, 2), 16: (20, 16, 2)}
PRELU_INIT = 0.25


class ConfigurationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionSpec:
    scale: int
    kernel: int
    stride: int
    pad: int

    def __post_init__(self):
        if PROJECTION_GEOMETRY.get(self.scale) != (self.kernel, self.stride, self.pad):
            raise ConfigurationError(
                f"unsupported projection geometry for x{self.scale}: "
                f"kernel={self.kernel} stride={self.stride} pad={self.pad}"
            )

    @classmethod
    def for_scale(cls, scale: int) -> "ProjectionSpec":
        if scale not in PROJECTION_GEOMETRY:
            raise ConfigurationError(f"no projection geometry for scale {scale}")
        return cls(scale, *PROJECTION_GEOMETRY[scale])


def conv3x3(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, padding=1)


def _check_channels(x: torch.Tensor, expected: int, who: str):
    if x.dim() != 4 or x.shape[1] != expected:
        raise ShapeError(f"{who}: expected N x {expected} x H x W input, got {tuple(x.shape)}")


class ResidualBlock(nn.Module):
    """x + conv(relu(conv(x))), no normalisation layers."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        _check_channels(x, self.channels, "ResidualBlock")
        return x + self.conv2(torch.relu(self.conv1(x)))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"channel count {channels} not divisible by reduction {reduction}"
            )
        self.channels = channels
        self.squeeze = nn.Conv2d(channels, channels // reduction, 1)
        self.excite = nn.Conv2d(channels // reduction, channels, 1)

    def forward(self, x):
        _check_channels(x, self.channels, "ChannelAttention")
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return x * torch.sigmoid(self.excite(torch.relu(self.squeeze(pooled))))


class ResidualGroup(nn.Module):
    def __init__(self, channels: int, n_blocks: int, reduction: int = 16):
        super().__init__()
        if n_blocks < 1:
            raise ConfigurationError(f"a residual group needs at least one block, got {n_blocks}")
        layers = []
        for _ in range(n_blocks):
            layers += [ResidualBlock(channels), ChannelAttention(channels, reduction)]
        self.body = nn.Sequential(*layers)
        self.tail = conv3x3(channels, channels)

    def forward(self, x):
        return x + self.tail(self.body(x))


class UpProjection(nn.Module):
    """Back-projection upsampler.

    h0 = deconv(x); l0 = conv(h0); h1 = deconv(l0 - x); out = h0 + h1.
    ``in_ch`` may differ from ``out_ch``; the inner conv maps back to ``in_ch``
    so the LR residual is well defined.
    """

    def __init__(self, in_ch: int, out_ch: int, spec: ProjectionSpec):
        super().__init__()
        k, s, p = spec.kernel, spec.stride, spec.pad
        self.spec = spec
        self.in_ch = in_ch
        self.up1 = nn.ConvTranspose2d(in_ch, out_ch, k, s, p)
        self.act1 = nn.PReLU(init=PRELU_INIT)
        self.down = nn.Conv2d(out_ch, in_ch, k, s, p)
        self.act2 = nn.PReLU(init=PRELU_INIT)
        self.up2 = nn.ConvTranspose2d(in_ch, out_ch, k, s, p)
        self.act3 = nn.PReLU(init=PRELU_INIT)

    def forward(self, x):
        _check_channels(x, self.in_ch, "UpProjection")
        h0 = self.act1(self.up1(x))
        l0 = self.act2(self.down(h0))
        h1 = self.act3(self.up2(l0 - x))
        return h0 + h1


class DownProjection(nn.Module):
    """Back-projection downsampler.

    l0 = conv(x); h0 = deconv(l0); l1 = conv(h0 - x); out = l0 + l1.
    The first conv performs any channel reduction (e.g. 2C -> C after fusion).
    """

    def __init__(self, in_ch: int, out_ch: int, spec: ProjectionSpec):
        super().__init__()
        k, s, p = spec.kernel, spec.stride, spec.pad
        self.spec = spec
        self.in_ch = in_ch
        self.down1 = nn.Conv2d(in_ch, out_ch, k, s, p)
        self.act1 = nn.PReLU(init=PRELU_INIT)
        self.up = nn.ConvTranspose2d(out_ch, in_ch, k, s, p)
        self.act2 = nn.PReLU(init=PRELU_INIT)
        self.down2 = nn.Conv2d(in_ch, out_ch, k, s, p)
        self.act3 = nn.PReLU(init=PRELU_INIT)

    def forward(self, x):
        _check_channels(x, self.in_ch, "DownProjection")
        h, w = x.shape[-2:]
        s = self.spec.scale
        if h % s or w % s:
            raise ShapeError(f"DownProjection: spatial dims {h}x{w} not divisible by {s}")
        l0 = self.act1(self.down1(x))
        h0 = self.act2(self.up(l0))
        l1 = self.act3(self.down2(h0 - x))
        return l0 + l1


class ConvReLUUnit(nn.Module):
    """Stride-1 stand-in for a projection unit when depth is pre-upsampled."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.in_ch = in_ch
        self.conv1 = conv3x3(in_ch, out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)

    def forward(self, x):
        _check_channels(x, self.in_ch, "ConvReLUUnit")
        return torch.relu(self.conv2(torch.relu(self.conv1(x))))

