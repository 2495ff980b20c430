"""Dataset model and ingestion.

On-disk layout: ``<root>/images/<id>.png`` paired with ``<root>/masks/<id>.png``;
masks are single-channel 8-bit class-index images with class 0 as background.
Loaded images are float32 in [0, 1], shaped (H, W, C); masks are int64 (H, W).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .seeding import np_rng

TRANSFER_PROVENANCES = ("augmented", "diffusion_sampled")


@dataclass(frozen=True)
class SegmentationSample:
    """One image/mask pair; the atomic supervised datum."""

    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    mask: np.ndarray  # (H, W) int64, values in [0, class_count)
    id: str

    def validate(self, class_count: int) -> None:
        if self.image.ndim != 3:
            raise ValidationError(f"{self.id}: image must be (H, W, C), got {self.image.shape}")
        if self.mask.ndim != 2:
            raise ValidationError(f"{self.id}: mask must be (H, W), got {self.mask.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ValidationError(
                f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} "
                "spatial dims differ"
            )
        if not np.isfinite(self.image).all():
            raise ValidationError(f"{self.id}: image contains non-finite values")
        if self.mask.min() < 0 or self.mask.max() >= class_count:
            bad = int(self.mask.max() if self.mask.max() >= class_count else self.mask.min())
            raise ValidationError(
                f"{self.id}: mask value {bad} outside [0, {class_count})"
            )


@dataclass
class LabeledDataset:
    samples: list[SegmentationSample]
    class_count: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.samples:
            raise ValidationError("dataset is empty")
        if self.class_count < 2:
            raise ValidationError(f"class_count must be >= 2, got {self.class_count}")
        self.samples = sorted(self.samples, key=lambda s: s.id)
        if not self.class_names:
            self.class_names = ["background"] + [
                f"class{i}" for i in range(1, self.class_count)
            ]
        for s in self.samples:
            s.validate(self.class_count)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def images_array(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks_array(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])


@dataclass
class TransferSet:
    """Unlabeled images used during distillation / SSL pretraining."""

    images: list[np.ndarray]  # each (H, W, C) float32 in [0, 1]
    provenance: str
    seed: int | None = None
    schedule_hash: str | None = None

    def __post_init__(self):
        if self.provenance not in TRANSFER_PROVENANCES:
            raise ValidationError(
                f"provenance must be one of {TRANSFER_PROVENANCES}, got {self.provenance!r}"
            )
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ValidationError(f"transfer images must share one shape, got {shapes}")

    @property
    def size(self) -> int:
        return len(self.images)

    def images_array(self) -> np.ndarray:
        return np.stack(self.images) if self.images else np.zeros((0,), dtype=np.float32)


def _load_image(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB") if img.mode in ("RGBA", "P", "CMYK") else img.convert("L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _load_mask(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.int64)


def load_dataset(root_path: str | Path, class_count: int) -> LabeledDataset:
    """Load a paired image/mask directory tree into a dataset sorted by id.

    Missing halves of a pair and out-of-range mask values raise
    ValidationError naming the offending file.
    """
    root = Path(root_path)
    img_dir = root / "images"
    mask_dir = root / "masks"
    if not img_dir.is_dir():
        raise ValidationError(f"missing images directory: {img_dir}")
    if not mask_dir.is_dir():
        raise ValidationError(f"missing masks directory: {mask_dir}")
    image_ids = {p.stem: p for p in img_dir.glob("*.png")}
    mask_ids = {p.stem: p for p in mask_dir.glob("*.png")}
    for sid in sorted(image_ids):
        if sid not in mask_ids:
            raise ValidationError(f"image without mask: {image_ids[sid]}")
    for sid in sorted(mask_ids):
        if sid not in image_ids:
            raise ValidationError(f"mask without image: {mask_ids[sid]}")
    if not image_ids:
        raise ValidationError(f"no image/mask pairs under {root}")

    class_names: list[str] = []
    meta = root / "meta.json"
    if meta.exists():
        info = json.loads(meta.read_text())
        class_names = list(info.get("class_names", []))

    samples = []
    for sid in sorted(image_ids):
        mask = _load_mask(mask_ids[sid])
        if mask.max() >= class_count:
            raise ValidationError(
                f"mask value {int(mask.max())} >= class_count {class_count} "
                f"in {mask_ids[sid]}"
            )
        samples.append(SegmentationSample(_load_image(image_ids[sid]), mask, sid))
    return LabeledDataset(samples, class_count, class_names)


def subset_labels(ds: LabeledDataset, budget: int, seed: int) -> LabeledDataset:
    """Deterministic label-budget subset: seeded shuffle of sorted ids, prefix take.

    The prefix rule makes budgets nested: the budget-b subset is contained in
    the budget-(b+1) subset for the same seed.
    """
    if budget <= 0 or budget > len(ds):
        raise ValidationError(f"budget {budget} outside (0, {len(ds)}]")
    ids = sorted(s.id for s in ds.samples)
    order = np_rng(seed, "subset_labels").permutation(len(ids))
    chosen = {ids[i] for i in order[:budget]}
    picked = [s for s in ds.samples if s.id in chosen]
    return LabeledDataset(picked, ds.class_count, list(ds.class_names))


def save_dataset(ds: LabeledDataset, root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        save_image_png(s.image, root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{s.id}.png")
    (root / "meta.json").write_text(
        json.dumps(
            {"class_count": ds.class_count, "class_names": ds.class_names},
            indent=2,
            sort_keys=True,
        )
    )


def save_image_png(image: np.ndarray, path: str | Path) -> None:
    """Write a float [0,1] image as 8-bit PNG (grayscale or RGB)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode=mode).save(path)


def save_transfer_set(ts: TransferSet, out_dir: str | Path) -> None:
    """Persist as numbered PNGs plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ts.images):
        save_image_png(img, out / f"{i:06d}.png")
    manifest = {
        "count": ts.size,
        "provenance": ts.provenance,
        "seed": ts.seed,
        "schedule_hash": ts.schedule_hash,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_transfer_set(in_dir: str | Path) -> TransferSet:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"not a transfer set (no manifest.json): {src}")
    manifest = json.loads(manifest_path.read_text())
    images = [_load_image(p) for p in sorted(src.glob("[0-9]*.png"))]
    if len(images) != manifest["count"]:
        raise ValidationError(
            f"manifest count {manifest['count']} != {len(images)} files in {src}"
        )
    return TransferSet(
        images,
        manifest["provenance"],
        seed=manifest.get("seed"),
        schedule_hash=manifest.get("schedule_hash"),
    )


def content_hash(root: str | Path) -> str:
    """sha256 over the sorted relative paths and bytes of all files in a tree."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
