"""Convert raw ISIC-2017 / PH2 downloads into the normalised dataset layout."""
from __future__ import annotations

import csv
import re
import shutil
from pathlib import Path

from PIL import Image

from .data import DataError, IMAGE_SUFFIXES, MASK_SUFFIX, load_manifest, read_mask, write_mask

ISIC_SPLITS = {"Training": "isic_train", "Validation": "isic_val", "Test_v2": "isic_test",
               "Test": "isic_test"}
_ISIC_DATA = re.compile(r"ISIC-2017_(Training|Validation|Test_v2|Test)_Data$")
_PH2_ID = re.compile(r"IMD\d+$")


def normalized_splits(root: Path) -> list[str]:
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "images").is_dir())


def detect_layout(raw: Path) -> str:
    if normalized_splits(raw):
        return "normalized"
    if any(_ISIC_DATA.match(p.name) for p in raw.rglob("ISIC-2017_*") if p.is_dir()):
        return "isic"
    if any(_PH2_ID.match(p.name) for p in raw.rglob("IMD*") if p.is_dir()):
        return "ph2"
    raise DataError(f"{raw}: unrecognised dataset layout (expected a normalised root, "
                    "ISIC-2017 download or PH2 download)")


def _write_labels(path: Path, labels: dict[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "class"])
        for k in sorted(labels):
            w.writerow([k, labels[k]])


def _isic_labels(csv_path: Path) -> dict[str, str]:
    labels = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if float(row["melanoma"]) >= 0.5:
                labels[row["image_id"]] = "mel"
            elif float(row["seborrheic_keratosis"]) >= 0.5:
                labels[row["image_id"]] = "sk"
            else:
                labels[row["image_id"]] = "nev"
    return labels


def prepare_isic(raw: Path, target: Path) -> list[str]:
    splits = []
    for data_dir in sorted(p for p in raw.rglob("ISIC-2017_*_Data") if p.is_dir()):
        m = _ISIC_DATA.match(data_dir.name)
        if not m:
            continue
        phase, split = m.group(1), ISIC_SPLITS[m.group(1)]
        gt_dir = data_dir.with_name(f"ISIC-2017_{phase}_Part1_GroundTruth")
        label_csv = data_dir.with_name(f"ISIC-2017_{phase}_Part3_GroundTruth.csv")
        out = target / split
        (out / "images").mkdir(parents=True, exist_ok=True)
        if gt_dir.is_dir():
            (out / "masks").mkdir(exist_ok=True)
        for img in sorted(data_dir.glob("ISIC_*.jpg")):
            shutil.copyfile(img, out / "images" / img.name)
            if gt_dir.is_dir():
                mask = gt_dir / f"{img.stem}{MASK_SUFFIX}"
                if not mask.exists():
                    raise DataError(f"missing ground truth {mask}")
                write_mask(read_mask(mask), out / "masks" / mask.name)
        if label_csv.exists():
            _write_labels(out / "labels.csv", _isic_labels(label_csv))
        splits.append(split)
    return splits


def _ph2_labels(raw: Path) -> dict[str, str]:
    """Clinical diagnosis 0/1 (common/atypical nevus) -> nev, 2 (melanoma) -> mel."""
    txt = next(iter(sorted(raw.rglob("PH2_dataset.txt"))), None)
    if txt is None:
        return {}
    labels, col = {}, None
    for line in txt.read_text(errors="replace").splitlines():
        cells = [c.strip() for c in line.split("||")]
        if col is None:
            if "Clinical Diagnosis" in cells:
                col = cells.index("Clinical Diagnosis")
            continue
        if len(cells) > col and any(_PH2_ID.match(c) for c in cells):
            image_id = next(c for c in cells if _PH2_ID.match(c))
            try:
                code = int(cells[col])
            except ValueError:
                continue
            labels[image_id] = "mel" if code == 2 else "nev"
    return labels


def prepare_ph2(raw: Path, target: Path, split: str = "ph2") -> list[str]:
    out = target / split
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    labels = _ph2_labels(raw)
    for case in sorted(p for p in raw.rglob("IMD*") if p.is_dir() and _PH2_ID.match(p.name)):
        image_id = case.name
        derm = [p for p in (case / f"{image_id}_Dermoscopic_Image").glob(f"{image_id}.*")
                if p.suffix.lower() in IMAGE_SUFFIXES]
        lesion = [p for p in (case / f"{image_id}_lesion").glob(f"{image_id}_lesion.*")
                  if p.suffix.lower() in IMAGE_SUFFIXES]
        if not derm:
            raise DataError(f"{case}: no dermoscopic image")
        if not lesion:
            raise DataError(f"{case}: no lesion mask")
        with Image.open(derm[0]) as im:
            im.convert("RGB").save(out / "images" / f"{image_id}.jpg", quality=95)
        write_mask(read_mask(lesion[0]), out / "masks" / f"{image_id}{MASK_SUFFIX}")
    if labels:
        _write_labels(out / "labels.csv", labels)
    return [split]


def prepare(raw, target) -> list[dict]:
    """Normalise ``raw`` into ``target``; returns one manifest summary per split.

    An already-normalised ``raw`` is left untouched (``target`` is ignored).
    """
    raw, target = Path(raw), Path(target)
    if not raw.exists():
        raise DataError(f"{raw} does not exist")
    layout = detect_layout(raw)
    if layout == "normalized":
        root, splits = raw, normalized_splits(raw)
    elif layout == "isic":
        root, splits = target, prepare_isic(raw, target)
    else:
        root, splits = target, prepare_ph2(raw, target)
    return [load_manifest(root, s).summary() | {"layout": layout} for s in splits]
