"""Camouflaged-object evaluation metrics.

All functions take a prediction map in [0, 1] and a binary ground truth of
the same shape, as 2-D arrays.

* ``s_measure``: structure measure, object- and region-aware similarity.
* ``e_measure_mean``: enhanced-alignment measure averaged over 256
  thresholds.
* ``weighted_f_measure``: F-measure with dependency- and
  importance-weighted errors.
* ``mae``: mean absolute error.
"""
from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from slenet.errors import ShapeError

log = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps
N_THRESHOLDS = 256
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class EmptyGroundTruthWarning(UserWarning):
    pass


def _prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if pred.ndim != 2:
        raise ShapeError(f"expected 2-D maps, got {pred.ndim}-D")
    return pred, gt.astype(bool)


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


# -- S-measure ---------------------------------------------------------------


def _object_similarity(x: np.ndarray, mask: np.ndarray) -> float:
    vals = x[mask]
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + _EPS)


def _object_score(pred, gt) -> float:
    u = gt.mean()
    fg = _object_similarity(pred * gt, gt)
    bg = _object_similarity((1 - pred) * ~gt, ~gt)
    return u * fg + (1 - u) * bg


def _centroid(gt) -> tuple[int, int]:
    """1-based (x, y) split point, rounded half to even."""
    rows, cols = np.nonzero(gt)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    mx, my = x.mean(), y.mean()
    denom = n - 1 if n > 1 else 1
    sx = np.sum((x - mx) ** 2) / denom
    sy = np.sum((y - my) ** 2) / denom
    sxy = np.sum((x - mx) * (y - my)) / denom
    a = 4 * mx * my * sxy
    b = (mx * mx + my * my) * (sx + sy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def _region_score(pred, gt) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    gtf = gt.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        p, g = pred[rs, cs], gtf[rs, cs]
        if p.size:
            score += p.size / (h * w) * _ssim(p, g)
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    return float(max(0.0, alpha * _object_score(pred, gt) + (1 - alpha) * _region_score(pred, gt)))


# -- E-measure ---------------------------------------------------------------


def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    """Bin centres of [0, 1]; no threshold coincides with 0 or 1."""
    return (np.arange(n) + 0.5) / n


def _enhanced(a, b):
    align = 2 * a * b / (a * a + b * b + _EPS)
    return (align + 1) ** 2 / 4


def e_measure_curve(pred, gt, n: int = N_THRESHOLDS) -> np.ndarray:
    """E-measure of ``pred >= t`` for each threshold ``t``."""
    pred, gt = _prepare(pred, gt)
    total = gt.size
    n_fg = int(gt.sum())
    ts = thresholds(n)
    fg_sorted = np.sort(pred[gt])
    bg_sorted = np.sort(pred[~gt])
    tp = fg_sorted.size - np.searchsorted(fg_sorted, ts, side="left")
    fp = bg_sorted.size - np.searchsorted(bg_sorted, ts, side="left")
    if n_fg == 0:
        return (total - tp - fp) / total
    if n_fg == total:
        return (tp + fp) / total
    fn = n_fg - tp
    tn = total - n_fg - fp
    mp = (tp + fp) / total
    mg = n_fg / total
    s = (tp * _enhanced(1 - mp, 1 - mg) + fp * _enhanced(1 - mp, -mg)
         + fn * _enhanced(-mp, 1 - mg) + tn * _enhanced(-mp, -mg))
    return s / total


def e_measure_mean(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).mean())


# -- weighted F-measure ------------------------------------------------------


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def _nearest_foreground_values(values: np.ndarray, gt: np.ndarray, reach: int) -> np.ndarray:
    """Copy of ``values`` where every background pixel holds the value of its
    nearest foreground pixel.

    Ties are broken toward the smallest (row, col). The rule is exact for
    pixels whose nearest foreground lies within ``reach`` pixels; farther
    pixels take scipy's choice.
    """
    _, (ri, ci) = ndimage.distance_transform_edt(~gt, return_indices=True)
    out = values[ri, ci]
    h, w = gt.shape
    offsets = sorted(
        ((dr * dr + dc * dc, dr, dc) for dr in range(-reach, reach + 1)
         for dc in range(-reach, reach + 1) if dr * dr + dc * dc <= reach * reach),
    )
    done = gt.copy()
    padded_gt = np.pad(gt, reach)
    padded_val = np.pad(values, reach)
    for _, dr, dc in offsets:
        win = (slice(reach + dr, reach + dr + h), slice(reach + dc, reach + dc + w))
        hit = padded_gt[win] & ~done
        out[hit] = padded_val[win][hit]
        done |= hit
    out[gt] = values[gt]
    return out


def weighted_f_measure(pred, gt, beta2: float = 1.0) -> float:
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        warnings.warn("empty ground truth: weighted F-measure defined as 0", EmptyGroundTruthWarning)
        return 0.0
    if not pred.any():
        return 0.0
    kernel = gaussian_kernel()
    err = np.abs(pred - gt)
    dist = ndimage.distance_transform_edt(~gt)
    # only background pixels inside the kernel footprint of a foreground
    # pixel reach the result
    reach = int(np.ceil(np.hypot(*(np.array(kernel.shape) // 2))))
    err_t = _nearest_foreground_values(err, gt, reach)
    err_a = ndimage.correlate(err_t, kernel, mode="constant", cval=0.0)
    min_err = np.where(gt & (err_a < err), err_a, err)
    importance = np.where(gt, 1.0, 2 - np.exp(np.log(0.5) / 5 * dist))
    ew = min_err * importance
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1 - ew[gt].mean()
    precision = tpw / (tpw + fpw + _EPS)
    return float((1 + beta2) * recall * precision / (recall + beta2 * precision + _EPS))


# -- folder evaluation -------------------------------------------------------


@dataclass
class ImageMetrics:
    id: str
    s_alpha: float
    e_phi: float
    f_beta_w: float
    mae: float


METRIC_NAMES = ("s_alpha", "e_phi", "f_beta_w", "mae")


@dataclass
class MetricReport:
    per_image: list[ImageMetrics] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    empty_gt: list[str] = field(default_factory=list)

    @property
    def means(self) -> dict[str, float]:
        if not self.per_image:
            return {k: float("nan") for k in METRIC_NAMES}
        return {k: float(np.mean([getattr(r, k) for r in self.per_image])) for k in METRIC_NAMES}

    @property
    def ok(self) -> bool:
        return not self.missing

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows_path = out_dir / f"{stem}.csv"
        with open(rows_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("id",) + METRIC_NAMES)
            writer.writeheader()
            for r in self.per_image:
                writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in asdict(r).items()})
        means_path = out_dir / f"{stem}_means.csv"
        with open(means_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("n_images", "n_missing") + METRIC_NAMES)
            m = self.means
            writer.writerow([len(self.per_image), len(self.missing)] + [f"{m[k]:.6f}" for k in METRIC_NAMES])
            for name in self.missing:
                writer.writerow(["missing", name])
        return rows_path, means_path


def evaluate_pair(name: str, pred, gt) -> tuple[ImageMetrics, bool]:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyGroundTruthWarning)
        fw = weighted_f_measure(pred, gt)
    empty = any(issubclass(w.category, EmptyGroundTruthWarning) for w in caught)
    return ImageMetrics(name, s_measure(pred, gt), e_measure_mean(pred, gt), fw, mae(pred, gt)), empty


def _index_images(folder: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_gray(path: Path, size=None) -> np.ndarray:
    img = Image.open(path).convert("L")
    if size is not None and img.size != size:
        img = img.resize(size, Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def evaluate_folder(pred_dir, gt_dir, workers: int = 1) -> MetricReport:
    """Score every prediction against the mask with the same stem.

    Predictions are read as 8-bit grayscale and divided by 255; masks are
    binarized at 128. Unpaired files are listed in ``report.missing``.
    """
    preds = _index_images(Path(pred_dir))
    gts = _index_images(Path(gt_dir))
    missing = sorted(set(preds) ^ set(gts))
    for name in missing:
        log.warning("no %s for %s", "prediction" if name in gts else "mask", name)
    names = sorted(set(preds) & set(gts))

    def one(name):
        gt_img = Image.open(gts[name])
        gt = load_gray(gts[name]) >= 128
        pred = load_gray(preds[name], size=gt_img.size) / 255.0
        return evaluate_pair(name, pred, gt)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, names))
    report = MetricReport(missing=missing)
    for metrics, empty in results:
        report.per_image.append(metrics)
        if empty:
            report.empty_gt.append(metrics.id)
    return report
