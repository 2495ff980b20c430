"""Procedural 3-class shapes dataset used for desk-scale experiments.

Each image holds one ellipse (class 1) and one rotated rectangle (class 2) on
a noisy dark background. Shape intensities are drawn from overlapping ranges,
so separating the two foreground classes requires geometry, not just a
per-pixel intensity threshold. Later-drawn shapes win overlaps.
"""

from __future__ import annotations

import numpy as np

from .data import LabeledDataset, SegmentationSample
from .seeding import np_rng

CLASS_NAMES = ["background", "ellipse", "rectangle"]
CLASS_COUNT = 3


def _rotated_coords(size: int, cx: float, cy: float, angle: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    return ca * dx + sa * dy, -sa * dx + ca * dy


def _one_sample(rng: np.random.Generator, size: int, noise_std: float) -> tuple[np.ndarray, np.ndarray]:
    img = np.full((size, size), rng.uniform(0.08, 0.22))
    # gentle illumination gradient so the background is not constant
    gy, gx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = img + rng.uniform(-0.06, 0.06) * gx + rng.uniform(-0.06, 0.06) * gy
    mask = np.zeros((size, size), dtype=np.int64)

    # centers kept in opposite halves so the two shapes rarely occlude
    left = rng.uniform(size * 0.22, size * 0.42)
    right = rng.uniform(size * 0.58, size * 0.78)
    if rng.random() < 0.5:
        left, right = right, left

    # ellipse
    ecx = left
    ecy = rng.uniform(size * 0.28, size * 0.72)
    era = rng.uniform(size * 0.16, size * 0.27)
    erb = rng.uniform(size * 0.13, size * 0.21)
    eang = rng.uniform(0, np.pi)
    u, v = _rotated_coords(size, ecx, ecy, eang)
    ellipse = (u / era) ** 2 + (v / erb) ** 2 <= 1.0
    eint = rng.uniform(0.52, 0.85)

    # rectangle
    rcx = right
    rcy = rng.uniform(size * 0.28, size * 0.72)
    rhw = rng.uniform(size * 0.14, size * 0.23)
    rhh = rng.uniform(size * 0.12, size * 0.19)
    rang = rng.uniform(0, np.pi)
    u, v = _rotated_coords(size, rcx, rcy, rang)
    rect = (np.abs(u) <= rhw) & (np.abs(v) <= rhh)
    rint = rng.uniform(0.35, 0.62)

    if rng.random() < 0.5:
        order = ((ellipse, 1, eint), (rect, 2, rint))
    else:
        order = ((rect, 2, rint), (ellipse, 1, eint))
    for region, cls, intensity in order:
        img[region] = intensity
        mask[region] = cls

    img = img + rng.normal(0.0, noise_std, size=(size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None], mask


def make_shapes_dataset(
    count: int,
    size: int = 64,
    seed: int = 0,
    noise_std: float = 0.04,
    id_prefix: str = "shape",
) -> LabeledDataset:
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    rng = np_rng(seed, "shapes", size)
    samples = []
    for i in range(count):
        img, mask = _one_sample(rng, size, noise_std)
        samples.append(SegmentationSample(img, mask, f"{id_prefix}{i:05d}"))
    return LabeledDataset(samples, CLASS_COUNT, list(CLASS_NAMES))
