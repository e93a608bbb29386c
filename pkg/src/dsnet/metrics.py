"""Binary-mask metrics, ROC/AUC and class-stratified reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

CLASSES = ("nev", "mel", "sk")
GROUPS = CLASSES + ("overall",)


class UndefinedAUCError(ValueError):
    """ROC/AUC needs at least one positive and one negative label."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def iou_hard(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def to_text(self) -> str:
        """Two-column ``fpr tpr`` text, one point per line."""
        return "".join(f"{f:.8f} {t:.8f}\n" for f, t in zip(self.fpr, self.tpr))

    @classmethod
    def from_text(cls, text: str) -> "RocCurve":
        rows = np.loadtxt(io.StringIO(text), ndmin=2)
        return cls(rows[:, 0], rows[:, 1], np.full(len(rows), np.nan))


def roc_and_auc(probs, labels) -> tuple[RocCurve, float]:
    """ROC points at every distinct score plus the trapezoidal area under them.

    Tied scores form a single step (diagonal segment), which gives tied
    positive/negative pairs half credit.
    """
    scores = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("probs and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(
            f"AUC undefined with {n_pos} positive and {n_neg} negative labels")
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    # last index of every run of equal scores
    distinct = np.flatnonzero(np.diff(scores)) if scores.size > 1 else np.array([], int)
    ends = np.r_[distinct, scores.size - 1]
    tps = np.cumsum(labels)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, scores[ends]]
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr, tpr, thresholds), auc


def auc_pairwise(probs, labels) -> float:
    """Mann-Whitney statistic by explicit pair counting (ties = 1/2)."""
    scores = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError("AUC undefined for single-class input")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size))


@dataclass
class ImageRecord:
    id: str
    class_label: str | None
    iou: float
    dice: float
    sn: float
    sp: float
    auc: float | None = None


@dataclass
class GroupStats:
    n: int
    miou: float
    mdice: float
    msn: float
    msp: float
    auc: float | None = None


@dataclass
class MetricsReport:
    records: list[ImageRecord]
    groups: dict[str, GroupStats]
    auc_mode: str = "pooled"
    seconds_per_image: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def overall(self) -> GroupStats:
        return self.groups["overall"]

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "class", "iou", "dice", "sn", "sp", "auc"])
        for r in self.records:
            w.writerow([r.id, r.class_label or "", f"{r.iou:.6f}", f"{r.dice:.6f}",
                        f"{r.sn:.6f}", f"{r.sp:.6f}", "" if r.auc is None else f"{r.auc:.6f}"])
        return buf.getvalue()

    def class_table_csv(self) -> str:
        """Rows mIoU/mSn/mSp/mDice/AUC, columns nev/mel/sk/overall (absent groups blank)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *GROUPS])
        for label, attr in (("mIoU", "miou"), ("mSn", "msn"), ("mSp", "msp"),
                            ("mDice", "mdice"), ("AUC", "auc"), ("n", "n")):
            row = [label]
            for g in GROUPS:
                stats = self.groups.get(g)
                value = None if stats is None else getattr(stats, attr)
                row.append("" if value is None else (str(value) if attr == "n" else f"{value:.6f}"))
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "groups": {k: asdict(v) for k, v in self.groups.items()},
            "auc_mode": self.auc_mode,
            "seconds_per_image": self.seconds_per_image,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls([ImageRecord(**r) for r in d["records"]],
                   {k: GroupStats(**v) for k, v in d["groups"].items()},
                   d.get("auc_mode", "pooled"), d.get("seconds_per_image"), d.get("meta", {}))

    def comparable(self) -> dict:
        """Everything except wall-clock timing."""
        d = self.to_dict()
        d.pop("seconds_per_image")
        return d


def parse_class_table(text: str) -> dict[str, dict[str, float | None]]:
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0][1:]
    out: dict[str, dict[str, float | None]] = {g: {} for g in header}
    for row in rows[1:]:
        for g, cell in zip(header, row[1:]):
            out[g][row[0]] = float(cell) if cell else None
    return out


def image_record(image_id: str, class_label: str | None, pred, gt,
                 probs=None) -> ImageRecord:
    c = confusion(pred, gt)
    auc = None
    if probs is not None:
        try:
            _, auc = roc_and_auc(probs, gt)
        except UndefinedAUCError:
            auc = None
    return ImageRecord(image_id, class_label, iou_hard(c), dice(c), sensitivity(c),
                       specificity(c), auc)


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def aggregate_report(records: Sequence[ImageRecord],
                     auc: dict[str, float | None] | None = None,
                     auc_mode: str = "pooled") -> MetricsReport:
    """Image-mean aggregates overall and per lesion class.

    ``auc`` maps group name to a pooled AUC. With ``auc_mode="per_image"`` the
    group AUC is instead the mean of the per-image AUCs that are defined.
    """
    if not records:
        raise ValueError("no per-image results to aggregate")
    for r in records:
        if r.class_label is not None and r.class_label not in CLASSES:
            raise ValueError(f"unknown class label {r.class_label!r} for image {r.id}")
    auc = auc or {}
    buckets: dict[str, list[ImageRecord]] = {"overall": list(records)}
    for c in CLASSES:
        members = [r for r in records if r.class_label == c]
        if members:
            buckets[c] = members
    groups = {}
    for name in GROUPS:
        if name not in buckets:
            continue
        rs = buckets[name]
        if auc_mode == "per_image":
            defined = [r.auc for r in rs if r.auc is not None]
            group_auc = _mean(defined) if defined else None
        else:
            group_auc = auc.get(name)
        groups[name] = GroupStats(len(rs), _mean(r.iou for r in rs), _mean(r.dice for r in rs),
                                  _mean(r.sn for r in rs), _mean(r.sp for r in rs), group_auc)
    return MetricsReport(list(records), groups, auc_mode)
