"""Training, prediction and evaluation runners."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from slenet.backbone import TOY_CHANNELS, BackboneSpec, parameter_digest
from slenet.datapipe import IMAGE_EXTS, DatasetManifest, FolderDataset, load_sample, normalize, resize_image
from slenet.errors import ConfigError, DataError, NumericalError
from slenet.metrics import METRIC_NAMES, MetricReport, evaluate_folder
from slenet.model import ModelConfig, SLENet, count_parameters
from slenet.objective import LossConfig, omega_m, total_loss

log = logging.getLogger(__name__)

HISTORY_FILE = "history.jsonl"
CHECKPOINT_FILE = "checkpoint.pt"


@dataclass
class RunConfig:
    backbone: str = "toy"
    channels: tuple[int, ...] | None = TOY_CHANNELS
    frozen: bool = False
    adapter_ratio: int = 4
    encoder_checkpoint: str | None = None
    width: int = 64
    lr: float = 5e-4
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    batch_size: int = 16
    epochs: int = 100
    mu: float = 0.6
    wbce_contrast_kernel: int = 31
    wbce_lambda: float = 5.0
    enable_gae: bool = True
    enable_lgb_mssd: bool = True
    literal_eq7: bool = False
    train_size: int = 352
    augment: bool = True
    seed: int = 0
    output_dir: str = "runs/default"
    device: str = "cpu"
    save_every: int = 10

    def __post_init__(self):
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.channels is not None:
            self.channels = tuple(self.channels)
        if self.train_size % 32:
            raise ConfigError("train_size must be a multiple of 32")
        for name in ("batch_size", "epochs", "width", "save_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def model_config(self) -> ModelConfig:
        spec = BackboneSpec(
            name=self.backbone,
            channels=self.channels if self.backbone == "toy" else None,
            frozen=self.frozen or self.backbone == "hiera-l",
            adapter_ratio=self.adapter_ratio,
            checkpoint=self.encoder_checkpoint,
        )
        return ModelConfig(spec, self.width, self.enable_gae, self.enable_lgb_mssd, self.literal_eq7)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.mu, self.epochs, self.wbce_contrast_kernel, self.wbce_lambda)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return 0.5 * base * (1 + math.cos(math.pi * epoch / epochs))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_model(config: RunConfig) -> SLENet:
    seed_everything(config.seed)
    return SLENet(config.model_config()).to(config.device)


@dataclass
class TrainResult:
    model: SLENet
    history: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None


def save_checkpoint(path, model, optimizer, scheduler, epoch, config, history) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "scheduler": scheduler.state_dict() if scheduler is not None else None,
            "epoch": epoch,
            "config": dataclasses.asdict(config),
            "history": history,
        },
        path,
    )
    return path


def load_checkpoint(path, device: str | None = None) -> tuple[SLENet, RunConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    config = RunConfig(**state["config"])
    if device is not None:
        config = config.replace(device=device)
    model = build_model(config)
    model.load_state_dict(state["model"])
    return model, config, state


def _trainable(model):
    return [p for p in model.parameters() if p.requires_grad]


def _frozen_digest(model) -> str | None:
    if not model.encoder.spec.frozen:
        return None
    return parameter_digest(model.encoder.frozen_parameters())


def train(config: RunConfig, manifest: DatasetManifest, resume: str | Path | None = None) -> TrainResult:
    """AdamW with per-epoch cosine decay; writes history and checkpoints to
    ``config.output_dir``.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config)
    loss_cfg = config.loss_config()
    dataset = FolderDataset(manifest, config.train_size, config.backbone, augment=config.augment, seed=config.seed)
    if len(dataset) == 0:
        raise DataError(f"no usable samples in {manifest.root}/{manifest.split}")

    optimizer = torch.optim.AdamW(_trainable(model), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda e: cosine_lr(1.0, e, config.epochs)
    )
    history: list[dict] = []
    start = 0
    if resume is not None:
        state = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        start = state["epoch"]
        history = list(state["history"])
    digest = _frozen_digest(model)

    history_path = out / HISTORY_FILE
    with open(history_path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")

    ckpt_path = out / CHECKPOINT_FILE
    for epoch in range(start, config.epochs):
        record = _train_epoch(model, optimizer, dataset, epoch, config, loss_cfg, out)
        scheduler.step()
        if digest is not None and _frozen_digest(model) != digest:
            raise RuntimeError(f"frozen encoder weights changed during epoch {epoch}")
        history.append(record)
        with open(history_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d loss %.4f lr %.2e omega_m %.3f", epoch, record["loss"], record["lr"], record["omega_m"])
        if (epoch + 1) % config.save_every == 0 or epoch + 1 == config.epochs:
            save_checkpoint(ckpt_path, model, optimizer, scheduler, epoch + 1, config, history)
    return TrainResult(model, history, ckpt_path)


def _train_epoch(model, optimizer, dataset, epoch, config, loss_cfg, out) -> dict:
    model.train()
    dataset.set_epoch(epoch)
    gen = torch.Generator().manual_seed(config.seed * 1_000_003 + epoch)
    order = torch.randperm(len(dataset), generator=gen).tolist()
    om = omega_m(epoch, loss_cfg)
    lr = optimizer.param_groups[0]["lr"]
    totals, m_terms = [], []
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        images, masks, _ = zip(*(dataset[i] for i in idx))
        images = torch.stack(images).to(config.device)
        masks = torch.stack(masks).to(config.device)
        loss = total_loss(model(images), masks, epoch, loss_cfg)
        if not torch.isfinite(loss.total):
            ids = [dataset.items[i][0] for i in idx]
            dump = Path(out) / f"nonfinite_epoch{epoch}_batch{start // config.batch_size}.pt"
            torch.save({"ids": ids, "images": images.cpu(), "masks": masks.cpu()}, dump)
            raise NumericalError(f"non-finite loss at epoch {epoch}, samples {ids}; batch saved to {dump}")
        optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        optimizer.step()
        totals.append(loss.total.item())
        if loss.m_term is not None:
            m_terms.append(loss.m_term.item())
    return {
        "epoch": epoch,
        "lr": lr,
        "omega_m": om,
        "loss": float(np.mean(totals)),
        "m_term": float(np.mean(m_terms)) if m_terms else None,
        "iters": len(totals),
    }


@torch.no_grad()
def predict_probability(model: SLENet, image: torch.Tensor, config: RunConfig, size) -> torch.Tensor:
    """sigma(P1) at ``size`` for one [0,1] RGB image (3,H,W)."""
    model.eval()
    x = normalize(resize_image(image, config.train_size), config.backbone)[None].to(config.device)
    p1 = model(x).p1
    p1 = F.interpolate(p1, size=tuple(size), mode="bilinear", align_corners=False)
    return torch.sigmoid(p1)[0, 0].cpu()


def _overlay(image: torch.Tensor, prob: torch.Tensor) -> Image.Image:
    rgb = image.permute(1, 2, 0).numpy()
    a = 0.5 * (prob.numpy() >= 0.5)[..., None]
    red = np.array([1.0, 0.0, 0.0])
    return Image.fromarray((np.clip(rgb * (1 - a) + red * a, 0, 1) * 255).round().astype(np.uint8))


def predict_paths(model, config, image_paths, out_dir, overlay: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if overlay:
        (out_dir / "overlay").mkdir(exist_ok=True)
    written = []
    for path in image_paths:
        try:
            sample = load_sample(path)
        except DataError as exc:
            log.warning("skipping %s", exc)
            continue
        prob = predict_probability(model, sample.image, config, sample.original_size)
        dst = out_dir / f"{sample.id}.png"
        Image.fromarray((prob.numpy() * 255).round().astype(np.uint8)).save(dst)
        written.append(dst)
        if overlay:
            _overlay(sample.image, prob).save(out_dir / "overlay" / f"{sample.id}.png")
    return written


def predict(checkpoint, image_dir, out_dir, overlay: bool = False, device: str | None = None) -> list[Path]:
    model, config, _ = load_checkpoint(checkpoint, device)
    paths = sorted(p for p in Path(image_dir).iterdir() if p.suffix.lower() in IMAGE_EXTS)
    return predict_paths(model, config, paths, out_dir, overlay)


def evaluate_model(model, config, manifest: DatasetManifest, out_dir, stem: str = "report") -> MetricReport:
    out_dir = Path(out_dir)
    pred_dir = out_dir / "preds"
    predict_paths(model, config, [img for img, _ in manifest.pairs], pred_dir)
    gt_dir = out_dir / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    for _, mask in manifest.pairs:
        dst = gt_dir / Path(mask).name
        if not dst.exists():
            dst.symlink_to(Path(mask).resolve())
    report = evaluate_folder(pred_dir, gt_dir)
    report.write(out_dir, stem)
    return report


def evaluate(checkpoint, manifest: DatasetManifest, out_dir, device: str | None = None) -> MetricReport:
    model, config, _ = load_checkpoint(checkpoint, device)
    return evaluate_model(model, config, manifest, out_dir)


def _write_table(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _metric_row(report: MetricReport) -> list[str]:
    m = report.means
    return [f"{m[k]:.4f}" for k in METRIC_NAMES]


def mu_sweep(config: RunConfig, manifest, eval_manifest=None, values=(0.2, 0.4, 0.6, 0.8)) -> list[dict]:
    """Train once per mu and tabulate the evaluation means."""
    eval_manifest = eval_manifest or manifest
    root = Path(config.output_dir)
    rows = []
    for mu in values:
        run = config.replace(mu=mu, output_dir=str(root / f"mu_{mu:g}"))
        result = train(run, manifest)
        report = evaluate_model(result.model, run, eval_manifest, run.output_dir)
        rows.append({"mu": mu, **report.means})
    _write_table(root / "mu_sweep.csv", ("mu",) + METRIC_NAMES,
                 [[f"{r['mu']:g}"] + [f"{r[k]:.4f}" for k in METRIC_NAMES] for r in rows])
    return rows


ABLATIONS = (
    # (enable_gae, enable_lgb_mssd): plain baseline, +GAE, +LGB&MSSD, full
    (False, False),
    (True, False),
    (False, True),
    (True, True),
)


def ablate(config: RunConfig, manifest, eval_manifest=None, train_models: bool = True) -> list[dict]:
    """One run per module combination; reports parameter counts and metrics."""
    eval_manifest = eval_manifest or manifest
    root = Path(config.output_dir)
    rows = []
    for gae, lgb in ABLATIONS:
        run = config.replace(enable_gae=gae, enable_lgb_mssd=lgb,
                             output_dir=str(root / f"gae{int(gae)}_lgb{int(lgb)}"))
        model = train(run, manifest).model if train_models else build_model(run)
        row = {"gae": gae, "lgb_mssd": lgb, "params": count_parameters(model)}
        if train_models:
            row.update(evaluate_model(model, run, eval_manifest, run.output_dir).means)
        rows.append(row)
    header = ("gae", "lgb_mssd", "params") + (METRIC_NAMES if train_models else ())
    _write_table(root / "ablation.csv", header,
                 [[int(r["gae"]), int(r["lgb_mssd"]), r["params"]]
                  + ([f"{r[k]:.4f}" for k in METRIC_NAMES] if train_models else []) for r in rows])
    return rows
