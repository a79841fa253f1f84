"""Training objective.

Each of the three decoder outputs is scored with a contrast-weighted BCE plus
a weighted IoU term. The localization map gets a plain BCE whose weight
``omega_m`` decays linearly over training, floored at 0.1.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from slenet.decode import PredictionSet
from slenet.errors import ConfigError, ShapeError

OMEGA_FLOOR = 0.1


@dataclass
class LossConfig:
    mu: float = 0.6
    epochs: int = 100
    wbce_contrast_kernel: int = 31
    wbce_lambda: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.wbce_contrast_kernel < 1 or self.wbce_contrast_kernel % 2 == 0:
            raise ConfigError("wbce_contrast_kernel must be a positive odd integer")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    m_term: torch.Tensor | None
    per_level: list[tuple[torch.Tensor, torch.Tensor]]
    omega_m: float

    def recombine(self) -> torch.Tensor:
        levels = sum(b + i for b, i in self.per_level)
        if self.m_term is None:
            return levels / len(self.per_level)
        return self.omega_m * self.m_term + (1 - self.omega_m) / len(self.per_level) * levels


def check_binary(g: torch.Tensor) -> None:
    if not torch.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary (values in {0, 1})")


def pixel_weights(g: torch.Tensor, kernel: int = 31, lam: float = 5.0) -> torch.Tensor:
    """``1 + lam * |avgpool_k(g) - g|``; the average ignores out-of-image pixels."""
    check_binary(g)
    local = F.avg_pool2d(g, kernel, stride=1, padding=kernel // 2, count_include_pad=False)
    return 1 + lam * (local - g).abs()


def _check_shapes(p, g, w):
    if p.shape != g.shape or (w is not None and w.shape != g.shape):
        raise ShapeError(f"shape mismatch: logits {tuple(p.shape)}, target {tuple(g.shape)}")


def weighted_bce(p: torch.Tensor, g: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    _check_shapes(p, g, w)
    bce = F.binary_cross_entropy_with_logits(p, g, reduction="none")
    per_sample = (w * bce).sum(dim=(1, 2, 3)) / w.sum(dim=(1, 2, 3))
    return per_sample.mean()


def weighted_iou(p: torch.Tensor, g: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    _check_shapes(p, g, w)
    prob = torch.sigmoid(p)
    inter = (w * prob * g).sum(dim=(1, 2, 3))
    union = (w * (prob + g - prob * g)).sum(dim=(1, 2, 3))
    return (1 - (inter + 1) / (union + 1)).mean()


def omega_m(epoch: int, cfg: LossConfig) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return max(cfg.mu * (1 - epoch / cfg.epochs), OMEGA_FLOOR)


def total_loss(pred: PredictionSet, g: torch.Tensor, epoch: int, cfg: LossConfig) -> LossBreakdown:
    """Combine level and localization terms; logits are upsampled to ``g``."""
    check_binary(g)
    size = g.shape[-2:]
    w = pixel_weights(g, cfg.wbce_contrast_kernel, cfg.wbce_lambda)
    per_level = []
    for p in pred.levels:
        p = _to_size(p, size)
        per_level.append((weighted_bce(p, g, w), weighted_iou(p, g, w)))
    om = omega_m(epoch, cfg)
    m_term = None
    if pred.m is not None:
        m_term = F.binary_cross_entropy_with_logits(_to_size(pred.m, size), g)
    out = LossBreakdown(total=None, m_term=m_term, per_level=per_level, omega_m=om)
    out.total = out.recombine()
    return out


def _to_size(x: torch.Tensor, size) -> torch.Tensor:
    if x.shape[-2:] == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
