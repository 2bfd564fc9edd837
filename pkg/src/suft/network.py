"""Full colour-guided depth SR network with multi-stage SUFT fusion."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .blocks import (
    ConfigurationError,
    ConvReLUUnit,
    ProjectionSpec,
    ResidualBlock,
    ResidualGroup,
    ShapeError,
    UpProjection,
    conv3x3,
)
from .data import VALID_SCALES, resample_matrix
from .transmission import SUFT, hflip

FUSION_MODES = ("iterative", "pre_upsample")


@dataclass
class NetworkConfig:
    scale: int = 4
    base_channels: int = 64
    rgb_blocks: int = 3
    shallow_groups: int = 4
    shallow_blocks: int = 4
    deep_groups: int = 2
    deep_blocks: int = 8
    suft_stages: int = 3
    reduction: int = 16
    fusion_mode: str = "iterative"
    uncertainty: bool = True
    shared_up: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scale not in VALID_SCALES:
            raise ConfigurationError(f"scale must be one of {VALID_SCALES}, got {self.scale}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}")
        if not 1 <= self.suft_stages <= self.rgb_blocks:
            raise ConfigurationError(
                f"suft_stages ({self.suft_stages}) must be in [1, rgb_blocks={self.rgb_blocks}]"
            )
        if self.suft_stages > self.shallow_groups:
            raise ConfigurationError(
                f"suft_stages ({self.suft_stages}) exceeds shallow_groups ({self.shallow_groups})"
            )
        for name in ("base_channels", "shallow_blocks", "deep_blocks", "reduction"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.deep_groups < 0:
            raise ConfigurationError("deep_groups must be >= 0")
        if self.base_channels % self.reduction:
            raise ConfigurationError(
                f"base_channels {self.base_channels} not divisible by reduction {self.reduction}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutput:
    depth_sr: torch.Tensor
    uncertainty: list = field(default_factory=list)


@lru_cache(maxsize=64)
def _resample_pair(h: int, w: int, out_h: int, out_w: int):
    return resample_matrix(h, out_h), resample_matrix(w, out_w)


def bicubic_upsample(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Torch counterpart of :func:`suft.data.bicubic_resample` on the last two axes."""
    h, w = x.shape[-2:]
    if scale == 1:
        return x
    my, mx = _resample_pair(h, w, h * scale, w * scale)
    my = torch.as_tensor(my, dtype=x.dtype, device=x.device)
    mx = torch.as_tensor(mx, dtype=x.dtype, device=x.device)
    return my @ x @ mx.T


class SUFTNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.base_channels
        spec = ProjectionSpec.for_scale(config.scale)
        iterative = config.fusion_mode == "iterative"

        self.rgb_head = conv3x3(3, c)
        self.rgb_body = nn.ModuleList(ResidualBlock(c) for _ in range(config.rgb_blocks))
        self.depth_head = conv3x3(1, c)
        self.shallow = nn.ModuleList(
            ResidualGroup(c, config.shallow_blocks, config.reduction)
            for _ in range(config.shallow_groups)
        )
        self.sufts = nn.ModuleList(
            SUFT(
                c, spec,
                fusion_mode=config.fusion_mode,
                uncertainty=config.uncertainty,
                shared_up=config.shared_up,
            )
            for _ in range(config.suft_stages)
        )
        self.aggregate = nn.Conv2d(c * config.shallow_groups, c, 1)
        self.upsample = UpProjection(c, c, spec) if iterative else ConvReLUUnit(c, c)
        self.deep = nn.ModuleList(
            ResidualGroup(c, config.deep_blocks, config.reduction)
            for _ in range(config.deep_groups)
        )
        self.tail = conv3x3(c, 1)

    @classmethod
    def from_params(cls, config: NetworkConfig, params) -> "SUFTNet":
        model = cls(config)
        model.load_state_dict(params)
        return model

    def _check_inputs(self, d_lr, i_g):
        if d_lr.dim() == 3:
            d_lr = d_lr.unsqueeze(0)
        if i_g.dim() == 3:
            i_g = i_g.unsqueeze(0)
        if d_lr.dim() != 4 or d_lr.shape[1] != 1:
            raise ShapeError(f"depth input must be N x 1 x h x w, got {tuple(d_lr.shape)}")
        if i_g.dim() != 4 or i_g.shape[1] != 3:
            raise ShapeError(f"guidance must be N x 3 x H x W, got {tuple(i_g.shape)}")
        s = self.config.scale
        h, w = d_lr.shape[-2:]
        if tuple(i_g.shape[-2:]) != (h * s, w * s):
            raise ShapeError(
                f"guidance {tuple(i_g.shape[-2:])} is not x{s} of depth {(h, w)}"
            )
        if d_lr.shape[0] != i_g.shape[0]:
            raise ShapeError("depth and guidance batch sizes differ")
        return d_lr, i_g

    def forward(self, d_lr, i_g, diagnostics: bool = False) -> ModelOutput:
        d_lr, i_g = self._check_inputs(d_lr, i_g)
        cfg = self.config
        skip = bicubic_upsample(d_lr, cfg.scale)
        x = self.depth_head(skip if cfg.fusion_mode == "pre_upsample" else d_lr)

        r = self.rgb_head(i_g)
        rgb_feats = []
        for block in self.rgb_body:
            r = block(r)
            rgb_feats.append(r)

        stage_outputs, maps = [], []
        for k, group in enumerate(self.shallow):
            x = group(x)
            if k < len(self.sufts):
                x, gate = self.sufts[k](x, rgb_feats[k], return_map=True)
                if diagnostics:
                    maps.append(gate)
            stage_outputs.append(x)

        x = self.upsample(self.aggregate(torch.cat(stage_outputs, dim=1)))
        for group in self.deep:
            x = group(x)
        return ModelOutput(self.tail(x) + skip, maps)


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """He-normal convolution weights, zero biases, deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                w = module.weight
                in_ch = w.shape[0] if isinstance(module, nn.ConvTranspose2d) else w.shape[1]
                fan_in = in_ch * w.shape[2] * w.shape[3]
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * math.sqrt(2.0 / fan_in))
                if module.bias is not None:
                    module.bias.zero_()
    return model


def build_model(config: NetworkConfig, seed: int | None = None) -> SUFTNet:
    return init_weights(SUFTNet(config), config.seed if seed is None else seed)


def init_params(config: NetworkConfig, seed: int | None = None) -> "OrderedDict[str, torch.Tensor]":
    return build_model(config, seed).state_dict()


def _as_batch(x, dtype=torch.float32):
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=dtype)
    return t.unsqueeze(0) if t.dim() == 3 else t


def forward(d_lr, i_g, params, config: NetworkConfig) -> ModelOutput:
    model = SUFTNet.from_params(config, params).eval()
    with torch.no_grad():
        return model(_as_batch(d_lr), _as_batch(i_g))


def forward_diagnostics(d_lr, i_g, params, config: NetworkConfig) -> ModelOutput:
    model = SUFTNet.from_params(config, params).eval()
    with torch.no_grad():
        return model(_as_batch(d_lr), _as_batch(i_g), diagnostics=True)


def pixel_space_uncertainty(model: nn.Module, d_lr, i_g) -> torch.Tensor:
    """|D_sr - flip(F(flip(d_lr), flip(i_g)))|, the flip disagreement in pixel space."""
    with torch.no_grad():
        d_sr = model(d_lr, i_g).depth_sr
        d_flipped = model(hflip(d_lr), hflip(i_g)).depth_sr
    return (d_sr - hflip(d_flipped)).abs()
