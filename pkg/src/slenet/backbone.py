"""Hierarchical encoders producing a four-level feature pyramid.

Two encoders share one contract: ``Encoder(image) -> FeaturePyramid`` with
levels at strides 4/8/16/32.

* ``"hiera-l"`` wraps the SAM2 Hiera-L trunk loaded from a checkpoint. Its
  weights are frozen and a bottleneck ``Adapter`` is inserted before every
  block.
* ``"toy"`` is a small convolutional stand-in for desk-scale runs. It is
  trainable by default but can be frozen the same way.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from slenet.errors import ConfigError, ShapeError

BACKBONES = ("hiera-l", "toy")
TOY_CHANNELS = (32, 64, 128, 256)

# SAM2 image preprocessing constants
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

HIERA_L_KWARGS = dict(
    embed_dim=144,
    num_heads=2,
    stages=(2, 6, 36, 4),
    global_att_blocks=(23, 33, 43),
    window_pos_embed_bkg_spatial_size=(7, 7),
    window_spec=(8, 4, 16, 8),
)


class FeaturePyramid(NamedTuple):
    x1: torch.Tensor
    x2: torch.Tensor
    x3: torch.Tensor
    x4: torch.Tensor


@dataclass
class BackboneSpec:
    name: str = "toy"
    channels: tuple[int, ...] | None = TOY_CHANNELS
    frozen: bool = False
    adapter_ratio: int = 4
    use_adapters: bool = True
    checkpoint: str | None = None

    def __post_init__(self):
        if self.name not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.name!r}; expected one of {BACKBONES}")
        if self.name == "hiera-l":
            if not self.frozen:
                raise ConfigError("hiera-l encoder must be frozen")
            if not self.use_adapters:
                raise ConfigError("hiera-l encoder requires adapters")
        if self.channels is not None:
            self.channels = tuple(int(c) for c in self.channels)
            if len(self.channels) != 4 or min(self.channels) <= 0:
                raise ConfigError(f"channels must be four positive ints, got {self.channels}")
        elif self.name == "toy":
            raise ConfigError("toy backbone needs explicit channels")
        if int(self.adapter_ratio) < 1:
            raise ConfigError("adapter_ratio must be a positive integer")


def input_stats(name: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel (mean, std) applied to [0,1] RGB before the encoder."""
    if name == "hiera-l":
        return IMAGENET_MEAN, IMAGENET_STD
    return (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)


def check_input_size(image: torch.Tensor) -> None:
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected (B,3,H,W) image, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ShapeError(f"input size {h}x{w} must be a multiple of 32 (and at least 32)")


class Adapter(nn.Module):
    """Bottleneck adapter acting on the last (embedding) dimension.

    ``out = x + GeLU(up(GeLU(down(x))))``. ``up`` starts at zero so a fresh
    adapter is the identity map.
    """

    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        hidden = dim // ratio
        if hidden < 1:
            raise ConfigError(f"adapter ratio {ratio} too large for width {dim}")
        self.dim = dim
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.normal_(self.down.weight, std=0.02)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.dim:
            raise ShapeError(f"adapter expects width {self.dim}, got {tokens.shape[-1]}")
        return tokens + F.gelu(self.up(F.gelu(self.down(tokens))))


class ChannelAdapter(Adapter):
    """Adapter for channel-first (B,C,H,W) maps."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class AdaptedBlock(nn.Module):
    def __init__(self, adapter: nn.Module, block: nn.Module):
        super().__init__()
        self.adapter = adapter
        self.block = block

    def forward(self, x):
        return self.block(self.adapter(x))


def conv_bn_relu(cin: int, cout: int, kernel=3, stride=1, padding=None, dilation=1) -> nn.Sequential:
    if padding is None:
        if isinstance(kernel, tuple):
            padding = tuple(dilation * (k // 2) for k in kernel)
        else:
            padding = dilation * (kernel // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=padding, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Stem + four stride-2 stages; stage k outputs at stride 2**(k+1)."""

    def __init__(self, channels=TOY_CHANNELS):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stem = conv_bn_relu(3, max(c1 // 2, 8), stride=2)
        ins = (max(c1 // 2, 8), c1, c2, c3)
        self.blocks = nn.ModuleList(
            nn.Sequential(conv_bn_relu(cin, cout, stride=2), conv_bn_relu(cout, cout))
            for cin, cout in zip(ins, channels)
        )
        self.block_dims = ins

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(image)
        outs = []
        for blk in self.blocks:
            x = blk(x)
            outs.append(x)
        return outs


class Encoder(nn.Module):
    def __init__(self, spec: BackboneSpec, trunk: nn.Module):
        super().__init__()
        self.spec = spec
        self.trunk = trunk
        self.channels = spec.channels
        if spec.frozen:
            self.freeze()

    def freeze(self) -> None:
        for name, p in self.trunk.named_parameters():
            p.requires_grad_(is_adapter_param(name))

    def train(self, mode: bool = True):
        super().train(mode)
        if self.spec.frozen:
            # frozen statistics too, not just weights
            for m in self.trunk.modules():
                if isinstance(m, nn.modules.batchnorm._BatchNorm):
                    m.eval()
        return self

    def adapter_parameters(self):
        return [p for n, p in self.trunk.named_parameters() if is_adapter_param(n)]

    def frozen_parameters(self):
        return [(n, p) for n, p in self.trunk.named_parameters() if not is_adapter_param(n)]

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        check_input_size(image)
        outs = self.trunk(image)
        if len(outs) != 4:
            raise ShapeError(f"backbone returned {len(outs)} levels, expected 4")
        return FeaturePyramid(*outs)


def is_adapter_param(name: str) -> bool:
    return ".adapter." in f".{name}"


def insert_adapters(blocks: nn.ModuleList, dims, ratio: int, channel_first: bool) -> None:
    """Wrap ``blocks[i]`` in place so an adapter runs before it."""
    cls = ChannelAdapter if channel_first else Adapter
    for i, dim in enumerate(dims):
        blocks[i] = AdaptedBlock(cls(dim, ratio), blocks[i])


def _build_toy(spec: BackboneSpec) -> nn.Module:
    trunk = ToyBackbone(spec.channels)
    if spec.use_adapters:
        insert_adapters(trunk.blocks, trunk.block_dims, spec.adapter_ratio, channel_first=True)
    return trunk


class _HieraTrunk(nn.Module):
    def __init__(self, hiera: nn.Module):
        super().__init__()
        self.hiera = hiera

    def forward(self, image):
        return self.hiera(image)


def _build_hiera_l(spec: BackboneSpec) -> nn.Module:
    path = Path(spec.checkpoint) if spec.checkpoint else None
    if path is None or not path.is_file():
        raise ConfigError(f"hiera-l checkpoint not found: {spec.checkpoint!r}")
    try:
        from sam2.modeling.backbones.hieradet import Hiera
    except ImportError as exc:
        raise ConfigError("the hiera-l backbone requires the `sam2` package") from exc

    hiera = Hiera(**HIERA_L_KWARGS)
    state = torch.load(path, map_location="cpu", weights_only=True)
    state = state.get("model", state)
    prefix = "image_encoder.trunk."
    trunk_state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    if not trunk_state:
        raise ConfigError(f"{path} holds no '{prefix}*' weights")
    hiera.load_state_dict(trunk_state, strict=True)
    spec.channels = tuple(reversed(hiera.channel_list))
    insert_adapters(hiera.blocks, [blk.dim for blk in hiera.blocks], spec.adapter_ratio, channel_first=False)
    return _HieraTrunk(hiera)


def build_encoder(spec: BackboneSpec) -> Encoder:
    if spec.name == "toy":
        return Encoder(spec, _build_toy(spec))
    if spec.name == "hiera-l":
        return Encoder(spec, _build_hiera_l(spec))
    raise ConfigError(f"unknown backbone {spec.name!r}")


def extract_features(image: torch.Tensor, encoder: Encoder) -> FeaturePyramid:
    return encoder(image)


def parameter_digest(params) -> str:
    """SHA-256 over named tensors; used to audit frozen weights."""
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
