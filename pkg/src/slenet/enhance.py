"""Gamma-asymmetric enhancement (GAE).

A cascade of four branches over one pyramid level. Branch ``r`` sees the
level through its own 1x1 reduction, works at ``1/2**(4-r)`` of the level's
resolution, and receives the upsampled output of branch ``r-1``. The last
branch output is reweighted by channel attention and scaled by a learnable
scalar ``gamma``::

    D1 = dil(AMP^3(X1))
    Cr = asy(cat(Xr, up(D_{r-1})))          r = 2, 3, 4
    Dr = dil(AMP^(4-r)(Cr))
    F  = gamma * (D4 * CA(D4))
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from slenet.backbone import conv_bn_relu
from slenet.errors import ConfigError, ShapeError

DILATION = 2


@dataclass
class GaeConfig:
    in_channels: int
    width: int = 64
    dilation_rate: int = DILATION
    gamma_init: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.in_channels <= 0:
            raise ConfigError("GAE channel counts must be positive")
        if self.dilation_rate != DILATION:
            raise ConfigError(f"GAE dilation rate is fixed at {DILATION}")


class AsymConv(nn.Sequential):
    """1x3 then 3x1 convolution, each with BN + ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__(conv_bn_relu(cin, cout, (1, 3)), conv_bn_relu(cout, cout, (3, 1)))


def amp(width: int, n: int) -> nn.Sequential:
    """``n`` (asymmetric conv, 2x2 ceil-mode max-pool) pairs."""
    layers = []
    for _ in range(n):
        layers += [AsymConv(width, width), nn.MaxPool2d(2, 2, ceil_mode=True)]
    return nn.Sequential(*layers)


def dilated(width: int) -> nn.Sequential:
    return conv_bn_relu(width, width, 3, dilation=DILATION)


class ChannelAttention(nn.Module):
    """Squeeze-excitation weights in (0,1), shape (B,C,1,1)."""

    def __init__(self, channels: int, reduction: int = 16, min_hidden: int = 4):
        super().__init__()
        hidden = max(channels // reduction, min_hidden)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc(F.adaptive_avg_pool2d(x, 1)))


class FirstBranch(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.amp = amp(width, 3)
        self.dil = dilated(width)

    def forward(self, x1r: torch.Tensor) -> torch.Tensor:
        return self.dil(self.amp(x1r))


class CascadeBranch(nn.Module):
    def __init__(self, width: int, r: int):
        super().__init__()
        if r not in (2, 3, 4):
            raise ConfigError(f"cascade branch index must be 2..4, got {r}")
        self.r = r
        self.width = width
        self.fuse = AsymConv(2 * width, width)
        self.amp = amp(width, 4 - r)
        self.dil = dilated(width)

    def forward(self, xr: torch.Tensor, d_prev: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(d_prev, size=xr.shape[-2:], mode="bilinear", align_corners=False)
        cat = torch.cat([xr, up], dim=1)
        if cat.shape[1] != 2 * self.width:
            raise ShapeError(f"branch {self.r}: expected {2 * self.width} channels after concat, got {cat.shape[1]}")
        return self.dil(self.amp(self.fuse(cat)))


class GAE(nn.Module):
    def __init__(self, cfg: GaeConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.reduce = nn.ModuleList(nn.Conv2d(cfg.in_channels, w, 1) for _ in range(4))
        self.branch1 = FirstBranch(w)
        self.branches = nn.ModuleList(CascadeBranch(w, r) for r in (2, 3, 4))
        self.ca = ChannelAttention(w)
        self.gamma = nn.Parameter(torch.tensor(float(cfg.gamma_init)))

    def branch_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        """[D1, D2, D3, D4] for a level feature ``x``."""
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"GAE expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        outs = [self.branch1(self.reduce[0](x))]
        for reduce, branch in zip(self.reduce[1:], self.branches):
            outs.append(branch(reduce(x), outs[-1]))
        return outs

    def cascade(self, x: torch.Tensor) -> torch.Tensor:
        return self.branch_outputs(x)[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d4 = self.cascade(x)
        return self.gamma * (d4 * self.ca(d4))


class PlainEnhance(nn.Module):
    """Single 3x3 conv block standing in for GAE in ablations."""

    def __init__(self, cfg: GaeConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = conv_bn_relu(cfg.in_channels, cfg.width)

    def forward(self, x):
        return self.conv(x)


def make_enhancer(cfg: GaeConfig, enabled: bool = True) -> nn.Module:
    return GAE(cfg) if enabled else PlainEnhance(cfg)
