"""Symmetric-uncertainty gated transmission of RGB features into the depth branch.

Depth features are projected to the guidance resolution twice, once as-is and
once mirrored.  After undoing the mirror, the per-pixel disagreement between the
two projections is pooled over channels, convolved to a single map and rescaled
to [0, 1].  That map weights the RGB features before they are concatenated with
the depth features and projected back to the depth resolution.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

from .blocks import ConvReLUUnit, DownProjection, ProjectionSpec, ShapeError, UpProjection

NORM_EPS = 1e-12
HEAD_KERNEL = 7


def hflip(f: torch.Tensor) -> torch.Tensor:
    """Reverse the width (last) axis."""
    return torch.flip(f, dims=(-1,))


def diff_map(depth_hr: torch.Tensor, flipped_hr: torch.Tensor, inverse=hflip) -> torch.Tensor:
    if depth_hr.shape != flipped_hr.shape:
        raise ShapeError(
            f"mirrored pair shapes differ: {tuple(depth_hr.shape)} vs {tuple(flipped_hr.shape)}"
        )
    return (depth_hr - inverse(flipped_hr)).abs()


def channel_pool(d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and max over the channel axis (dim -3), keeping it as size 1."""
    return d.mean(dim=-3, keepdim=True), d.amax(dim=-3, keepdim=True)


def normalize_map(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Min-max rescale. Batched (4D) inputs are rescaled per sample."""
    if x.dim() == 4:
        flat = x.flatten(1)
        lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
        hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    else:
        lo, hi = x.min(), x.max()
    return (x - lo) / ((hi - lo) + eps)


class UncertaintyHead(nn.Module):
    """Pooled disagreement maps -> normalised single-channel uncertainty."""

    def __init__(self, kernel: int = HEAD_KERNEL, eps: float = NORM_EPS):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)
        self.eps = eps

    def forward(self, depth_hr, flipped_hr, inverse=hflip):
        avg, mx = channel_pool(diff_map(depth_hr, flipped_hr, inverse))
        return normalize_map(self.conv(torch.cat([avg, mx], dim=1)), self.eps)


def symmetric_uncertainty(depth_hr, flipped_hr, head: UncertaintyHead, inverse=hflip):
    return head(depth_hr, flipped_hr, inverse)


class SUFT(nn.Module):
    """One cross-resolution fusion stage.

    In ``iterative`` mode the projections are back-projection units at
    ``spec.scale``; in ``pre_upsample`` mode depth features already live at the
    guidance resolution and the projections become stride-1 conv+relu units.
    With ``uncertainty=False`` the RGB features are concatenated ungated.
    """

    def __init__(
        self,
        channels: int,
        spec: ProjectionSpec,
        *,
        fusion_mode: str = "iterative",
        uncertainty: bool = True,
        shared_up: bool = True,
        transform: Callable = hflip,
        inverse: Callable | None = None,
    ):
        super().__init__()
        if fusion_mode not in ("iterative", "pre_upsample"):
            raise ValueError(f"unknown fusion mode {fusion_mode!r}")
        self.spec = spec
        self.fusion_mode = fusion_mode
        self.uncertainty = uncertainty
        self.shared_up = shared_up
        self.transform = transform
        self.inverse = inverse or transform

        def up():
            if fusion_mode == "iterative":
                return UpProjection(channels, channels, spec)
            return ConvReLUUnit(channels, channels)

        self.up = up()
        if uncertainty:
            self.up_flipped = None if shared_up else up()
            self.head = UncertaintyHead()
        if fusion_mode == "iterative":
            self.down = DownProjection(2 * channels, channels, spec)
        else:
            self.down = ConvReLUUnit(2 * channels, channels)

    @property
    def factor(self) -> int:
        return self.spec.scale if self.fusion_mode == "iterative" else 1

    def mirrored_pair(self, f_depth_lr):
        up_flipped = self.up_flipped or self.up
        return self.up(f_depth_lr), up_flipped(self.transform(f_depth_lr))

    def forward(self, f_depth_lr, f_rgb_hr, return_map: bool = False):
        h, w = f_depth_lr.shape[-2:]
        expected = (h * self.factor, w * self.factor)
        if tuple(f_rgb_hr.shape[-2:]) != expected:
            raise ShapeError(
                f"RGB features {tuple(f_rgb_hr.shape[-2:])} do not match depth features "
                f"{(h, w)} at x{self.factor}"
            )
        if self.uncertainty:
            depth_hr, flipped_hr = self.mirrored_pair(f_depth_lr)
            gate = self.head(depth_hr, flipped_hr, self.inverse)
        else:
            depth_hr = self.up(f_depth_lr)
            gate = torch.ones_like(depth_hr[:, :1])
        fused_hr = torch.cat([depth_hr, gate * f_rgb_hr], dim=1)
        out = self.down(fused_hr)
        return (out, gate) if return_map else out
