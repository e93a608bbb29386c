"""Dataset manifests, image canonicalisation and paired geometric augmentation.

Normalised dataset layout::

    <root>/<split>/images/<id>.jpg
    <root>/<split>/masks/<id>_segmentation.png     # 8-bit, {0, 255}
    <root>/<split>/labels.csv                      # id,class  (mel | sk | nev)
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .metrics import CLASSES

CANONICAL_SIZE = (192, 256)
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")
MASK_SUFFIX = "_segmentation.png"

# class proportions (mel, sk, nev) of the public splits
PUBLISHED_PROPORTIONS = {
    "isic_train": {"mel": 0.188, "sk": 0.127, "nev": 0.685},
    "isic_val": {"mel": 0.200, "sk": 0.280, "nev": 0.520},
    "isic_test": {"mel": 0.195, "sk": 0.150, "nev": 0.655},
    "ph2": {"mel": 0.200, "sk": 0.000, "nev": 0.800},
}
PUBLISHED_COUNTS = {"isic_train": 2000, "isic_val": 150, "isic_test": 600, "ph2": 200}


class DataError(Exception):
    """Dataset on disk is missing, malformed or inconsistent."""


@dataclass
class ManifestRecord:
    id: str
    image_path: Path
    mask_path: Path | None
    class_label: str | None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list[ManifestRecord]

    def __len__(self):
        return len(self.records)

    @property
    def labeled(self) -> bool:
        return all(r.mask_path is not None for r in self.records)

    def class_counts(self) -> dict[str, int]:
        counts = Counter(r.class_label for r in self.records if r.class_label)
        return {c: counts.get(c, 0) for c in CLASSES}

    def class_proportions(self) -> dict[str, float]:
        counts = self.class_counts()
        total = sum(counts.values())
        return {c: (n / total if total else 0.0) for c, n in counts.items()}

    def reference_proportions(self) -> dict[str, float] | None:
        return PUBLISHED_PROPORTIONS.get(self.split)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def summary(self) -> dict:
        out = {
            "root": str(self.root),
            "split": self.split,
            "count": len(self),
            "labeled": self.labeled,
            "class_counts": self.class_counts(),
            "class_proportions": self.class_proportions(),
        }
        ref = self.reference_proportions()
        if ref is not None:
            out["reference_proportions"] = ref
            out["reference_count"] = PUBLISHED_COUNTS[self.split]
        return out


def _read_labels(path: Path) -> dict[str, str]:
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "class"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns id,class")
        for row in reader:
            cls = row["class"].strip().lower()
            if cls not in CLASSES:
                raise DataError(f"{path}: unknown class {row['class']!r} for {row['id']}")
            labels[row["id"].strip()] = cls
    return labels


def load_manifest(root, split: str) -> DatasetManifest:
    root = Path(root)
    split_dir = root / split
    image_dir = split_dir / "images"
    if not image_dir.is_dir():
        raise DataError(f"{image_dir} does not exist")
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise DataError(f"empty dataset: no images in {image_dir}")
    mask_dir = split_dir / "masks"
    labels_path = split_dir / "labels.csv"
    labels = _read_labels(labels_path) if labels_path.exists() else {}
    records, seen = [], set()
    for img in images:
        image_id = img.stem
        if image_id in seen:
            raise DataError(f"duplicate image id {image_id!r} in {image_dir}")
        seen.add(image_id)
        mask = None
        if mask_dir.is_dir():
            mask = mask_dir / f"{image_id}{MASK_SUFFIX}"
            if not mask.exists():
                raise DataError(f"missing mask for {image_id}: {mask}")
        records.append(ManifestRecord(image_id, img, mask, labels.get(image_id)))
    return DatasetManifest(root, split, records)


# ---------------------------------------------------------------------------
# Canonicalisation
# ---------------------------------------------------------------------------

@dataclass
class ImageSample:
    id: str
    image: np.ndarray                 # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray | None = None    # (H, W) uint8 in {0, 1}
    class_label: str | None = None
    source: str | None = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"{self.id}: mask {self.mask.shape} vs image {self.image.shape}")


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            m = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return (m >= 128).astype(np.uint8)


def write_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def _normalise(image: np.ndarray, normalization: str, stats=None) -> np.ndarray:
    if normalization == "none":
        return image
    if normalization == "per_image":
        mean = image.mean(axis=(0, 1))
        std = image.std(axis=(0, 1))
    elif normalization == "dataset":
        if stats is None:
            raise ValueError("dataset normalisation needs (mean, std) stats")
        mean, std = (np.asarray(s, dtype=np.float32) for s in stats)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    z = (image - mean) / np.where(std > 0, std, 1)
    lo, hi = z.min(), z.max()
    if hi == lo:
        return np.zeros_like(image)
    return ((z - lo) / (hi - lo)).astype(np.float32)


def canonicalize(image: np.ndarray, mask: np.ndarray | None = None,
                 size: tuple[int, int] = CANONICAL_SIZE, normalization: str = "none",
                 stats=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Resize to ``size`` (H, W) and scale into [0, 1].

    Images use bilinear interpolation, masks nearest-neighbour followed by
    re-binarisation at 0.5. Aspect ratio is not preserved.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an RGB image, got shape {image.shape}")
    if mask is not None and np.asarray(mask).shape[:2] != image.shape[:2]:
        raise DataError(f"mask {np.asarray(mask).shape} and image {image.shape} differ in size")
    h, w = size
    img = np.asarray(Image.fromarray(image.astype(np.uint8)).resize((w, h), Image.BILINEAR))
    out = _normalise(img.astype(np.float32) / 255.0, normalization, stats)
    out_mask = None
    if mask is not None:
        m = np.asarray(mask).astype(np.float32)
        if m.max() > 1:
            m = m / 255.0
        m8 = Image.fromarray((m * 255).astype(np.uint8), mode="L").resize((w, h), Image.NEAREST)
        out_mask = (np.asarray(m8) / 255.0 >= 0.5).astype(np.uint8)
    return out, out_mask


def load_sample(record: ManifestRecord, size=CANONICAL_SIZE, source: str | None = None,
                normalization: str = "none", stats=None) -> ImageSample:
    image = read_image(record.image_path)
    mask = read_mask(record.mask_path) if record.mask_path is not None else None
    img, m = canonicalize(image, mask, size, normalization, stats)
    return ImageSample(record.id, img, m, record.class_label, source)


def load_samples(manifest: DatasetManifest, size=CANONICAL_SIZE, normalization: str = "none",
                 stats=None) -> list[ImageSample]:
    return [load_sample(r, size, manifest.split, normalization, stats) for r in manifest.records]


def compute_dataset_stats(samples: Sequence[ImageSample]) -> tuple[np.ndarray, np.ndarray]:
    stack = np.stack([s.image for s in samples])
    return stack.mean(axis=(0, 1, 2)), stack.std(axis=(0, 1, 2))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationParams:
    rotation_range: float = 40.0   # degrees, symmetric
    zoom_range: float = 0.1        # scale drawn from [1 - z, 1 + z]
    shift_range: float = 0.1       # fraction of each dimension
    horizontal_flip: bool = True
    vertical_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rotation_range < 0 or self.zoom_range < 0 or self.shift_range < 0:
            raise ValueError("augmentation ranges must be nonnegative")
        if self.zoom_range >= 1:
            raise ValueError("zoom_range must be < 1")

    @classmethod
    def none(cls) -> "AugmentationParams":
        return cls(0.0, 0.0, 0.0, False, False)


@dataclass(frozen=True)
class GeometricTransform:
    angle: float = 0.0        # degrees, counter-clockwise as displayed
    zoom: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)   # (rows, cols) in pixels
    hflip: bool = False
    vflip: bool = False

    @property
    def is_identity(self) -> bool:
        return (self.angle == 0 and self.zoom == 1 and self.shift == (0.0, 0.0)
                and not self.hflip and not self.vflip)

    def matrix(self) -> np.ndarray:
        """Forward 2x2 map on centred (row, col) coordinates."""
        t = math.radians(self.angle)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        flip = np.diag([-1.0 if self.vflip else 1.0, -1.0 if self.hflip else 1.0])
        return rot @ (self.zoom * flip)


def sample_transform(params: AugmentationParams, shape: tuple[int, int],
                     rng: np.random.Generator) -> GeometricTransform:
    # draw every component unconditionally so the stream stays aligned
    angle = rng.uniform(-params.rotation_range, params.rotation_range)
    zoom = rng.uniform(1 - params.zoom_range, 1 + params.zoom_range)
    dr = rng.uniform(-params.shift_range, params.shift_range) * shape[0]
    dc = rng.uniform(-params.shift_range, params.shift_range) * shape[1]
    hflip = bool(rng.random() < 0.5) and params.horizontal_flip
    vflip = bool(rng.random() < 0.5) and params.vertical_flip
    return GeometricTransform(float(angle), float(zoom), (float(dr), float(dc)), hflip, vflip)


def apply_transform(sample: ImageSample, tf: GeometricTransform) -> ImageSample:
    """Warp image (bilinear) and mask (nearest) with the same affine map, reflect padding."""
    if tf.is_identity:
        return ImageSample(sample.id, sample.image.copy(),
                           None if sample.mask is None else sample.mask.copy(),
                           sample.class_label, sample.source)
    h, w = sample.image.shape[:2]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    inv = np.linalg.inv(tf.matrix())
    offset = centre - inv @ (centre + np.asarray(tf.shift))
    # snap float noise so right-angle rotations and flips sample exact pixel centres
    inv = np.where(np.abs(inv - np.round(inv)) < 1e-12, np.round(inv), inv)
    offset = np.where(np.abs(offset - np.round(offset)) < 1e-9, np.round(offset), offset)
    channels = [ndimage.affine_transform(sample.image[..., c], inv, offset, order=1,
                                         mode="reflect") for c in range(sample.image.shape[2])]
    image = np.clip(np.stack(channels, axis=-1), 0, 1).astype(np.float32)
    mask = None
    if sample.mask is not None:
        warped = ndimage.affine_transform(sample.mask.astype(np.float32), inv, offset, order=0,
                                          mode="reflect")
        mask = (warped >= 0.5).astype(np.uint8)
    return ImageSample(sample.id, image, mask, sample.class_label, sample.source)


def augment(sample: ImageSample, params: AugmentationParams,
            rng: np.random.Generator) -> ImageSample:
    tf = sample_transform(params, sample.image.shape[:2], rng)
    return apply_transform(sample, tf)


def iter_batches(samples: Sequence[ImageSample], batch_size: int,
                 augmentation: AugmentationParams | None = None, seed: int = 0,
                 epoch: int = 0, shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of ``(images (B,H,W,3), masks (B,H,W,1))`` float32 batches.

    Order and augmentation draws depend only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    if not samples:
        raise DataError("no samples to iterate")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        batch = [samples[i] for i in order[start:start + batch_size]]
        if augmentation is not None:
            batch = [augment(s, augmentation, rng) for s in batch]
        images = np.stack([s.image for s in batch]).astype(np.float32)
        masks = np.stack([s.mask for s in batch]).astype(np.float32)[..., None]
        yield images, masks


def batch_iterator(manifest_or_samples, batch_size: int, augment_on: bool = True,
                   seed: int = 0, epochs: int = 1, params: AugmentationParams | None = None,
                   size=CANONICAL_SIZE) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Stream batches over ``epochs`` epochs from a manifest or preloaded samples."""
    if isinstance(manifest_or_samples, DatasetManifest):
        samples = load_samples(manifest_or_samples, size)
    else:
        samples = list(manifest_or_samples)
    aug = (params or AugmentationParams(seed=seed)) if augment_on else None
    for epoch in range(epochs):
        yield from iter_batches(samples, batch_size, aug, seed, epoch)
