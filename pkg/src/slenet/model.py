"""Full network: encoder -> per-level enhancement -> localization -> decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from slenet.backbone import BackboneSpec, build_encoder
from slenet.decode import GuidedDecoder, PlainDecoder, PredictionSet
from slenet.enhance import GaeConfig, make_enhancer
from slenet.locate import LocalizationBranch


@dataclass
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    width: int = 64
    enable_gae: bool = True
    enable_lgb_mssd: bool = True
    literal_eq7: bool = False
    down_mode: str = "bilinear"


class SLENet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.encoder = build_encoder(cfg.backbone)
        channels = self.encoder.channels
        self.enhance = nn.ModuleList(
            make_enhancer(GaeConfig(in_channels=c, width=cfg.width), cfg.enable_gae) for c in channels
        )
        if cfg.enable_lgb_mssd:
            self.locate = LocalizationBranch(
                channels,
                cfg.width,
                down_mode=cfg.down_mode,
                literal_eq7=cfg.literal_eq7,
                enable_gae=cfg.enable_gae,
            )
            self.decoder = GuidedDecoder(cfg.width)
        else:
            self.locate = None
            self.decoder = PlainDecoder(cfg.width)

    def forward(self, image: torch.Tensor) -> PredictionSet:
        pyramid = self.encoder(image)
        feats = [enh(x) for enh, x in zip(self.enhance, pyramid)]
        m = self.locate(pyramid)[0] if self.locate is not None else None
        return self.decoder(feats, m)


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
