"""Synthetic dermoscopy-like fixtures: a dark elliptical lesion on noisy skin."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .data import MASK_SUFFIX, write_mask

SKIN = np.array([0.85, 0.65, 0.55])
LESION = np.array([0.35, 0.20, 0.15])


def synthetic_pair(seed: int, height: int = 96, width: int = 128,
                   noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(uint8 RGB image, uint8 {0,1} mask)`` with one elliptical lesion."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:height, :width]
    cy, cx = rng.uniform(0.3, 0.7) * height, rng.uniform(0.3, 0.7) * width
    ry, rx = rng.uniform(0.15, 0.3) * height, rng.uniform(0.15, 0.3) * width
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1).astype(np.uint8)
    img = np.where(mask[..., None] > 0, LESION, SKIN) + rng.normal(0, noise, (height, width, 3))
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8), mask


def write_fixture(root, split: str, classes, height: int = 96, width: int = 128,
                  seed: int = 0, with_masks: bool = True, noise: float = 0.05,
                  image_format: str = "jpg") -> Path:
    """Write one split in the normalised layout; ``classes`` gives one label per image.

    ``image_format="png"`` keeps pixels lossless, which exact-score tests rely on.
    """
    out = Path(root) / split
    (out / "images").mkdir(parents=True, exist_ok=True)
    if with_masks:
        (out / "masks").mkdir(exist_ok=True)
    rows = []
    for i, cls in enumerate(classes):
        image_id = f"{split}_{i:04d}"
        img, mask = synthetic_pair(seed * 10007 + i, height, width, noise)
        Image.fromarray(img).save(out / "images" / f"{image_id}.{image_format}", quality=95)
        if with_masks:
            write_mask(mask, out / "masks" / f"{image_id}{MASK_SUFFIX}")
        rows.append((image_id, cls))
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "class"])
        w.writerows(rows)
    return out
