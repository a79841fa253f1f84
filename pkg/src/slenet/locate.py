"""Localization guidance branch.

Bottom-up fusion of the unified-width pyramid into a stride-32 logit map::

    F2 = GAE(down(X1) + X2)
    Fi = GAE(down(F_{i-1}) + Xi)      i = 3, 4
    M  = head(F4)
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from slenet.backbone import FeaturePyramid, conv_bn_relu
from slenet.enhance import GaeConfig, make_enhancer
from slenet.errors import ConfigError, ShapeError


def reduce_block(cin: int, width: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, width, 1, bias=False), nn.BatchNorm2d(width))


def downsample(x: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    if mode == "bilinear":
        return F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
    if mode == "maxpool":
        return F.max_pool2d(x, 2, 2, ceil_mode=True)
    raise ConfigError(f"unknown downsampling mode {mode!r}")


def upsample_map(m: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of a logit map to ``size`` (H, W)."""
    size = tuple(size)
    if tuple(m.shape[-2:]) == size:
        return m
    if size[0] < m.shape[-2] or size[1] < m.shape[-1]:
        raise ShapeError(f"upsample target {size} smaller than source {tuple(m.shape[-2:])}")
    return F.interpolate(m, size=size, mode="bilinear", align_corners=False)


class LocalizationBranch(nn.Module):
    def __init__(
        self,
        in_channels,
        width: int = 64,
        down_mode: str = "bilinear",
        literal_eq7: bool = False,
        enable_gae: bool = True,
    ):
        super().__init__()
        self.width = width
        self.down_mode = down_mode
        self.reduce = nn.ModuleList(reduce_block(c, width) for c in in_channels)
        self.enhance = nn.ModuleList(
            make_enhancer(GaeConfig(in_channels=width, width=width), enable_gae) for _ in range(3)
        )
        if literal_eq7:
            self.head = conv_bn_relu(width, 1, 1)
        else:
            # keep the sign of the logits
            self.head = nn.Conv2d(width, 1, 1)

    def reduce_channels(self, pyramid: FeaturePyramid) -> list[torch.Tensor]:
        return [r(x) for r, x in zip(self.reduce, pyramid)]

    def fuse(self, xl: list[torch.Tensor]) -> torch.Tensor:
        """Return F4 from the reduced levels."""
        f = xl[0]
        for enhance, x in zip(self.enhance, xl[1:]):
            d = downsample(f, self.down_mode)
            if d.shape[-2:] != x.shape[-2:]:
                raise ShapeError(f"downsampled {tuple(d.shape[-2:])} does not align with {tuple(x.shape[-2:])}")
            f = enhance(d + x)
        return f

    def forward(self, pyramid: FeaturePyramid) -> tuple[torch.Tensor, torch.Tensor]:
        f4 = self.fuse(self.reduce_channels(pyramid))
        return self.head(f4), f4
