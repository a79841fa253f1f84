"""Folder datasets of image/mask pairs.

Layout::

    <root>/<split>/images/*.{jpg,png}
    <root>/<split>/masks/*.png        8-bit grayscale, object >= 128
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from slenet.backbone import input_stats
from slenet.errors import DataError

log = logging.getLogger(__name__)

TRAIN_SIZE = 352
IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")
MASK_EXTS = (".png",)


@dataclass
class ImageSample:
    id: str
    image: torch.Tensor  # (3, H, W) float in [0, 1] before normalization
    mask: torch.Tensor  # (1, H, W) in {0, 1}
    original_size: tuple[int, int]  # (H0, W0)


@dataclass
class DatasetManifest:
    root: str
    split: str
    pairs: list[tuple[str, str]] = field(default_factory=list)
    orphans: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.pairs)

    @property
    def ids(self) -> list[str]:
        return [Path(img).stem for img, _ in self.pairs]

    def to_json(self) -> str:
        return json.dumps(
            {"root": self.root, "split": self.split, "count": self.count, "pairs": self.pairs, "orphans": self.orphans},
            indent=1,
            sort_keys=True,
        )


def _stems(folder: Path, exts) -> dict[str, Path]:
    if not folder.is_dir():
        raise DataError(f"missing directory {folder}")
    out = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in exts:
            if p.stem in out:
                raise DataError(f"duplicate stem {p.stem!r} in {folder}")
            out[p.stem] = p
    return out


def build_manifest(root, split: str, strict: bool = True) -> DatasetManifest:
    root = Path(root)
    images = _stems(root / split / "images", IMAGE_EXTS)
    masks = _stems(root / split / "masks", MASK_EXTS)
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        msg = f"{len(orphans)} unpaired file(s) in {root / split}: {', '.join(orphans[:10])}"
        if strict:
            raise DataError(msg)
        log.warning(msg)
    pairs = [(str(images[s]), str(masks[s])) for s in sorted(set(images) & set(masks))]
    return DatasetManifest(str(root), split, pairs, orphans)


def image_to_tensor(img: Image.Image) -> torch.Tensor:
    return torch.from_numpy(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0).permute(2, 0, 1).contiguous()


def normalize(image: torch.Tensor, backbone: str) -> torch.Tensor:
    mean, std = input_stats(backbone)
    mean = torch.tensor(mean, dtype=image.dtype).view(3, 1, 1)
    std = torch.tensor(std, dtype=image.dtype).view(3, 1, 1)
    return (image - mean) / std


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    if image.shape[-2:] == (size, size):
        return image
    return F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)[0]


def resize_mask(mask: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resize, re-binarized at 0.5."""
    size = (size, size) if isinstance(size, int) else tuple(size)
    if mask.shape[-2:] != size:
        mask = F.interpolate(mask[None], size=size, mode="nearest-exact")[0]
    return (mask >= 0.5).to(torch.float32)


def load_sample(image_path, mask_path=None) -> ImageSample:
    try:
        with Image.open(image_path) as img:
            image = image_to_tensor(img)
        mask = None
        if mask_path is not None:
            with Image.open(mask_path) as m:
                mask = torch.from_numpy((np.asarray(m.convert("L")) >= 128).astype(np.float32))[None]
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {image_path}: {exc}") from exc
    h, w = image.shape[-2:]
    if mask is not None and mask.shape[-2:] != (h, w):
        raise DataError(f"{image_path}: mask size {tuple(mask.shape[-2:])} != image size {(h, w)}")
    if mask is None:
        mask = torch.zeros(1, h, w)
    return ImageSample(Path(image_path).stem, image, mask, (h, w))


def load_and_resize(image_path, mask_path, train_size: int = TRAIN_SIZE, backbone: str = "toy"):
    """Return ``(image, mask, sample)`` ready for the network."""
    sample = load_sample(image_path, mask_path)
    image = normalize(resize_image(sample.image, train_size), backbone)
    mask = resize_mask(sample.mask, train_size)
    return image, mask, sample


def augment(image: torch.Tensor, mask: torch.Tensor, seed: int, p: float = 0.5):
    """Joint horizontal flip with probability ``p``; decided by ``seed``."""
    rng = np.random.default_rng(seed)
    if rng.random() < p:
        return image.flip(-1), mask.flip(-1)
    return image, mask


class FolderDataset(Dataset):
    """Resized, normalized pairs from a manifest.

    Unreadable files are skipped with a warning; more than 1% failures is a
    ``DataError``.
    """

    def __init__(self, manifest: DatasetManifest, train_size=TRAIN_SIZE, backbone="toy",
                 augment: bool = False, seed: int = 0):
        self.train_size = train_size
        self.backbone = backbone
        self.augment = augment
        self.seed = seed
        self.epoch = 0
        self.items = []
        failed = []
        for img_path, mask_path in manifest.pairs:
            try:
                image, mask, sample = load_and_resize(img_path, mask_path, train_size, backbone)
            except DataError as exc:
                log.warning("skipping %s", exc)
                failed.append(img_path)
                continue
            self.items.append((sample.id, image, mask))
        if manifest.pairs and len(failed) > 0.01 * len(manifest.pairs):
            raise DataError(f"{len(failed)}/{len(manifest.pairs)} samples unreadable in {manifest.split}")

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.items)

    def __getitem__(self, idx):
        name, image, mask = self.items[idx]
        if self.augment:
            image, mask = augment(image, mask, seed=[self.seed, self.epoch, idx])
        return image, mask, idx


def synthetic_shapes(n: int, size: int = 128, seed: int = 0, noise: float = 0.15):
    """Geometric shapes on noisy backgrounds as (image, mask) uint8 arrays."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        bg = rng.uniform(0.2, 0.8, size=3)
        fg = np.clip(bg + rng.choice([-1, 1], size=3) * rng.uniform(0.15, 0.3, size=3), 0, 1)
        mask_img = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(mask_img)
        for _ in range(rng.integers(1, 3)):
            r = rng.uniform(0.12, 0.25) * size
            cx, cy = rng.uniform(r, size - r, size=2)
            box = [cx - r, cy - r, cx + r, cy + r]
            kind = rng.integers(3)
            if kind == 0:
                draw.ellipse(box, fill=255)
            elif kind == 1:
                draw.rectangle(box, fill=255)
            else:
                draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=255)
        mask = np.asarray(mask_img) >= 128
        img = np.where(mask[..., None], fg, bg) + rng.normal(0, noise, size=(size, size, 3))
        out.append(((np.clip(img, 0, 1) * 255).astype(np.uint8), mask.astype(np.uint8) * 255))
    return out


def write_synthetic_dataset(root, split: str, n: int, size: int = 128, seed: int = 0) -> DatasetManifest:
    root = Path(root)
    (root / split / "images").mkdir(parents=True, exist_ok=True)
    (root / split / "masks").mkdir(parents=True, exist_ok=True)
    for i, (img, mask) in enumerate(synthetic_shapes(n, size, seed)):
        Image.fromarray(img).save(root / split / "images" / f"shape_{i:04d}.png")
        Image.fromarray(mask).save(root / split / "masks" / f"shape_{i:04d}.png")
    return build_manifest(root, split)
