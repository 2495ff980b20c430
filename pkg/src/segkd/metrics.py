"""Segmentation evaluation metrics: Dice, 95th-percentile boundary distance,
mean IoU, and PSNR/MSE for transfer-set quality.

Conventions (fixed here, used everywhere):
  - Boundary pixels are mask pixels with at least one 4-neighbor outside the
    mask; pixels on the image edge count their out-of-bounds neighbors as
    background.
  - hd95 pools both directed boundary-distance sets and takes the 95th
    percentile with linear interpolation. ``directed_percentile_max=True``
    switches to the max of the two directed percentiles instead.
  - Classes empty in both masks score Dice 1.0 and are skipped from means;
    classes empty in exactly one score Dice/IoU 0.0 and have undefined hd95.
  - Report means run over foreground classes only (class 0 is background).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ValidationError

PSNR_INF = math.inf

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class BinaryMaskPair:
    """A predicted/reference boolean mask pair with optional pixel spacing."""

    predicted: np.ndarray
    reference: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        a = np.asarray(self.predicted, dtype=bool)
        b = np.asarray(self.reference, dtype=bool)
        if a.shape != b.shape:
            raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
        if a.ndim != 2:
            raise ValidationError(f"masks must be 2-D, got {a.ndim}-D")
        object.__setattr__(self, "predicted", a)
        object.__setattr__(self, "reference", b)


def dice(pair: BinaryMaskPair) -> float:
    """Overlap coefficient 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = pair.predicted, pair.reference
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of mask pixels with >=1 non-mask 4-neighbor (edges included)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~eroded


def hd95(pair: BinaryMaskPair, directed_percentile_max: bool = False) -> float:
    """95th-percentile Euclidean boundary distance between the two masks.

    Raises ValidationError when either mask is empty; callers producing
    reports should treat that case as an undefined entry instead.
    """
    a, b = pair.predicted, pair.reference
    if not a.any() or not b.any():
        raise ValidationError("hd95 undefined: at least one mask is empty")
    ba = boundary_pixels(a)
    bb = boundary_pixels(b)
    spacing = pair.pixel_spacing
    # Distance from every pixel to the nearest boundary pixel of the other mask.
    dist_to_bb = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dist_to_ba = ndimage.distance_transform_edt(~ba, sampling=spacing)
    d_ab = dist_to_bb[ba]
    d_ba = dist_to_ba[bb]
    if directed_percentile_max:
        return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def iou(pair: BinaryMaskPair) -> float:
    a, b = pair.predicted, pair.reference
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def miou(pred_mask: np.ndarray, ref_mask: np.ndarray, class_count: int) -> float:
    """Mean IoU over foreground classes present in either mask.

    Classes empty in both masks are skipped; returns NaN when no foreground
    class occurs in either mask.
    """
    pred_mask = np.asarray(pred_mask)
    ref_mask = np.asarray(ref_mask)
    if pred_mask.shape != ref_mask.shape:
        raise ValidationError(f"mask shapes differ: {pred_mask.shape} vs {ref_mask.shape}")
    vals = []
    for c in range(1, class_count):
        a = pred_mask == c
        b = ref_mask == c
        if not a.any() and not b.any():
            continue
        vals.append(iou(BinaryMaskPair(a, b)))
    return float(np.mean(vals)) if vals else float("nan")


def psnr_mse(img_a: np.ndarray, img_b: np.ndarray, peak: float = 255.0) -> tuple[float, float]:
    """(psnr_db, mse) of two images already expressed on the same scale as `peak`.

    mse == 0 reports psnr as +inf.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValidationError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF, 0.0
    return 10.0 * math.log10(peak * peak / mse), mse


def psnr_from_mse(mse: float, peak: float = 255.0) -> float:
    if peak <= 0:
        raise ValidationError(f"peak must be > 0, got {peak}")
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class ClassMetrics:
    dice: float
    hd95: float | None  # None when undefined for every sample
    iou: float
    samples_used: int
    dice_skipped: int  # samples where the class was empty in both masks
    hd95_undefined: int  # samples where hd95 had no defined value

    @property
    def flags(self) -> str:
        parts = []
        if self.dice_skipped:
            parts.append(f"empty_in_both={self.dice_skipped}")
        if self.hd95_undefined:
            parts.append(f"hd95_undefined={self.hd95_undefined}")
        return ";".join(parts)


@dataclass
class MetricsReport:
    """Per-foreground-class and mean metrics for one evaluation run."""

    class_names: list[str]
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        vals = [m.dice for m in self.per_class.values() if m.samples_used > 0]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_hd95(self) -> float:
        vals = [m.hd95 for m in self.per_class.values() if m.hd95 is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_iou(self) -> float:
        vals = [m.iou for m in self.per_class.values() if m.samples_used > 0]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "dice", "hd95", "iou", "flags"])
            for cls in sorted(self.per_class):
                m = self.per_class[cls]
                name = self.class_names[cls] if cls < len(self.class_names) else str(cls)
                writer.writerow([name, _fmt(m.dice), _fmt(m.hd95), _fmt(m.iou), m.flags])
            writer.writerow(
                ["mean", _fmt(self.mean_dice), _fmt(self.mean_hd95), _fmt(self.mean_iou), ""]
            )


def _fmt(x: float | None) -> str:
    if x is None:
        return "undefined"
    if math.isinf(x):
        return "inf"
    return repr(float(x))


def compute_report(
    pred_masks: list[np.ndarray] | np.ndarray,
    ref_masks: list[np.ndarray] | np.ndarray,
    class_count: int,
    class_names: list[str] | None = None,
    pixel_spacing: tuple[float, float] = (1.0, 1.0),
) -> MetricsReport:
    """Aggregate per-class Dice/HD95/IoU over a set of mask pairs.

    Per class: samples with the class empty in both masks are skipped from
    the Dice/IoU means; hd95 averages only samples where both masks contain
    the class.
    """
    if len(pred_masks) != len(ref_masks):
        raise ValidationError("prediction and reference counts differ")
    if len(pred_masks) == 0:
        raise ValidationError("cannot evaluate an empty set")
    if class_names is None:
        class_names = ["background"] + [f"class{i}" for i in range(1, class_count)]
    report = MetricsReport(class_names=list(class_names))
    for c in range(1, class_count):
        dices, ious, hds = [], [], []
        skipped = 0
        undefined = 0
        for pm, rm in zip(pred_masks, ref_masks):
            a = np.asarray(pm) == c
            b = np.asarray(rm) == c
            if not a.any() and not b.any():
                skipped += 1
                continue
            pair = BinaryMaskPair(a, b, pixel_spacing)
            dices.append(dice(pair))
            ious.append(iou(pair))
            if a.any() and b.any():
                hds.append(hd95(pair))
            else:
                undefined += 1
        report.per_class[c] = ClassMetrics(
            dice=float(np.mean(dices)) if dices else float("nan"),
            hd95=float(np.mean(hds)) if hds else None,
            iou=float(np.mean(ious)) if ious else float("nan"),
            samples_used=len(dices),
            dice_skipped=skipped,
            hd95_undefined=undefined,
        )
    return report
