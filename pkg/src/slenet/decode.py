"""Multi-scale supervised decoder.

Top-down over levels 3, 2, 1. Each level fuses its enhanced feature with the
upsampled deeper output, modulates the result with per-pixel scale/shift
maps derived from the localization map, adds a spatial-attention residual and
emits a logit map.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from slenet.backbone import conv_bn_relu
from slenet.errors import ShapeError
from slenet.locate import upsample_map


@dataclass
class PredictionSet:
    """Raw logits at strides 4/8/16 plus the stride-32 map (or None)."""

    p1: torch.Tensor
    p2: torch.Tensor
    p3: torch.Tensor
    m: torch.Tensor | None = None

    @property
    def levels(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.p1, self.p2, self.p3


class FuseBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.convs = nn.Sequential(conv_bn_relu(2 * width, width), conv_bn_relu(width, width))

    def forward(self, f: torch.Tensor, deeper: torch.Tensor) -> torch.Tensor:
        h, w = f.shape[-2:]
        dh, dw = deeper.shape[-2:]
        if (dh, dw) != ((h + 1) // 2, (w + 1) // 2):
            raise ShapeError(f"deeper input {dh}x{dw} is not one stride coarser than {h}x{w}")
        up = F.interpolate(deeper, size=(h, w), mode="bilinear", align_corners=False)
        return self.convs(torch.cat([f, up], dim=1))


def _affine_head(width: int) -> nn.Sequential:
    return nn.Sequential(conv_bn_relu(1, width), nn.Conv2d(width, width, 3, padding=1))


class Modulation(nn.Module):
    """``S'' = BN(S') * alpha(M) + beta(M)`` with parameter-free BN."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(width, affine=False)
        self.alpha = _affine_head(width)
        self.beta = _affine_head(width)

    def affine(self, m: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
        m = upsample_map(m, size)
        return self.alpha(m), self.beta(m)

    def forward(self, s: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        alpha, beta = self.affine(m, s.shape[-2:])
        return self.norm(s) * alpha + beta


class SpatialAttention(nn.Module):
    """Pre-sigmoid (B,1,H,W) map from channel max and mean."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1)
        return self.conv(pooled)


class AttentionHead(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.sa = SpatialAttention()
        self.pred = nn.Conv2d(width, 1, 1)

    def forward(self, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        r = torch.sigmoid(self.sa(s)) * s + s
        return r, self.pred(r)


class DecoderLevel(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fuse = FuseBlock(width)
        self.modulate = Modulation(width)
        self.head = AttentionHead(width)

    def forward(self, f, deeper, m):
        s = self.modulate(self.fuse(f, deeper), m)
        return self.head(s)


class GuidedDecoder(nn.Module):
    def __init__(self, width: int = 64):
        super().__init__()
        self.levels = nn.ModuleList(DecoderLevel(width) for _ in range(3))

    def forward(self, feats, m: torch.Tensor) -> PredictionSet:
        f1, f2, f3, f4 = feats
        preds = []
        deeper = f4
        for level, f in zip(reversed(self.levels), (f3, f2, f1)):
            deeper, p = level(f, deeper, m)
            preds.append(p)
        p3, p2, p1 = preds
        return PredictionSet(p1, p2, p3, m)


class PlainDecoder(nn.Module):
    """U-Net style top-down decoder: fuse blocks and 1x1 heads only."""

    def __init__(self, width: int = 64):
        super().__init__()
        self.fuse = nn.ModuleList(FuseBlock(width) for _ in range(3))
        self.pred = nn.ModuleList(nn.Conv2d(width, 1, 1) for _ in range(3))

    def forward(self, feats, m=None) -> PredictionSet:
        f1, f2, f3, f4 = feats
        preds = []
        deeper = f4
        for fuse, pred, f in zip(reversed(self.fuse), reversed(self.pred), (f3, f2, f1)):
            deeper = fuse(f, deeper)
            preds.append(pred(deeper))
        p3, p2, p1 = preds
        return PredictionSet(p1, p2, p3, None)
