"""Command-line entry point: prepare, train, evaluate, predict and compare.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402
from PIL import Image, ImageDraw, ImageFont  # noqa: E402

from .checkpoint import WeightLoadError, load_checkpoint, read_manifest, save_checkpoint  # noqa: E402
from .data import (MASK_SUFFIX, AugmentationParams, DataError, canonicalize, load_manifest,  # noqa: E402
                   load_samples, read_image, read_mask, write_mask)
from .losses import LOSSES  # noqa: E402
from .metrics import GROUPS, RocCurve, confusion, dice, iou_hard  # noqa: E402
from .model import (NETWORKS, NetworkSpec, ShapeError, SpecError, build_model,  # noqa: E402
                    count_parameters, forward)
from .postprocess import postprocess  # noqa: E402
from .prepare import prepare  # noqa: E402
from .published import NETWORK_TABLE, SECONDS_PER_IMAGE, reference_for_split  # noqa: E402
from .training import (CheckpointError, TrainingConfig, TrainingDivergedError, evaluate,  # noqa: E402
                       pooled_roc, train)

log = logging.getLogger("dsnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
ROC_TEXT_POINTS = 2001


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_TRAINING_FIELDS = {f.name for f in dataclasses.fields(TrainingConfig)} - {
    "max_epochs", "batch_size", "loss", "seed", "augment"}


@dataclass
class RunConfig:
    """Settings for one command; a config file supplies defaults and flags win."""
    command: str
    data_root: str | None = None
    split: str | None = None
    val_split: str | None = None
    network: str = "dsnet"
    loss: str = "combined"
    out: str | None = None
    seed: int = 0
    epochs: int = 100
    batch_size: int = 16
    checkpoint: str | None = None
    encoder_weights: str | None = None
    height: int = 192
    width: int = 256
    augment: bool = True
    auc_mode: str = "pooled"
    training: dict = field(default_factory=dict)       # further TrainingConfig fields
    model_options: dict = field(default_factory=dict)  # network spec / baseline overrides

    def __post_init__(self):
        if self.network not in NETWORKS:
            raise UsageError(f"unknown network {self.network!r}; choose from {', '.join(NETWORKS)}")
        if self.loss not in LOSSES:
            raise UsageError(f"unknown loss {self.loss!r}; choose from {', '.join(LOSSES)}")
        if self.epochs < 0 or self.batch_size < 1 or self.height < 1 or self.width < 1:
            raise UsageError("epochs must be >= 0; batch size, height and width must be >= 1")
        if self.auc_mode not in ("pooled", "per_image"):
            raise UsageError(f"unknown AUC mode {self.auc_mode!r}")
        unknown = set(self.training) - _TRAINING_FIELDS
        if unknown:
            raise UsageError(f"unknown training settings: {', '.join(sorted(unknown))}")

    @classmethod
    def from_sources(cls, command: str, flags: dict, config_file=None) -> "RunConfig":
        values: dict = {}
        if config_file is not None:
            values.update(_read_config(Path(config_file)))
        values.update({k: v for k, v in flags.items() if v is not None})
        names = {f.name for f in dataclasses.fields(cls)} - {"command"}
        unknown = set(values) - names
        if unknown:
            raise UsageError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        return cls(command=command, **values)

    def training_config(self) -> TrainingConfig:
        extra = dict(self.training)
        if isinstance(extra.get("augmentation"), dict):
            extra["augmentation"] = AugmentationParams(**extra["augmentation"])
        try:
            return TrainingConfig(max_epochs=self.epochs, batch_size=self.batch_size,
                                  loss=self.loss, seed=self.seed, augment=self.augment, **extra)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid training settings: {exc}") from exc


def _read_config(path: Path) -> dict:
    try:
        values = yaml.safe_load(path.read_text())   # JSON is valid YAML
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in values.items()}


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise UsageError(f"{cfg.command} needs {', '.join(missing)}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def ids_fingerprint(ids) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def build_network(cfg: RunConfig):
    options = dict(cfg.model_options)
    if cfg.network == "dsnet":
        spec = NetworkSpec.from_dict({"input_height": cfg.height, "input_width": cfg.width,
                                      **options})
        return build_model("dsnet", spec, seed=cfg.seed, encoder_weights=cfg.encoder_weights)
    if cfg.encoder_weights:
        raise UsageError(f"--encoder-weights only applies to dsnet, not {cfg.network}")
    return build_model(cfg.network, None, seed=cfg.seed, input_height=cfg.height,
                       input_width=cfg.width, **options)


def open_checkpoint(cfg: RunConfig, network_given: bool):
    _require(cfg, "checkpoint")
    stored = (read_manifest(cfg.checkpoint).get("config") or {}).get("network")
    if network_given and stored is not None and stored != cfg.network:
        raise UsageError(f"checkpoint {cfg.checkpoint} holds a {stored} network, "
                         f"but --network is {cfg.network}")
    return load_checkpoint(cfg.checkpoint)


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OverlaySpec:
    """Colours for the confusion classes and the corner annotations.

    Unlabelled pixels show the image in grey (r == g == b), so none of the three
    colours can appear by accident and pixel tallies equal the confusion counts.
    The annotations sit in a black band above the image for the same reason.
    """
    tp: tuple[int, int, int] = (0, 255, 0)
    fn: tuple[int, int, int] = (255, 0, 0)
    fp: tuple[int, int, int] = (255, 255, 0)
    dice_corner: str = "top-left"
    iou_corner: str = "top-right"
    decimals: int = 3
    band_height: int = 14

    def __post_init__(self):
        colours = (self.tp, self.fn, self.fp)
        if len(set(colours)) != 3:
            raise ValueError("overlay colours must be distinct")
        if any(c[0] == c[1] == c[2] for c in colours):
            raise ValueError("overlay colours must not be grey")

    def annotations(self, dice_value: float, iou_value: float) -> dict[str, str]:
        return {self.dice_corner: f"Dice {dice_value:.{self.decimals}f}",
                self.iou_corner: f"IoU {iou_value:.{self.decimals}f}"}


def render_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray,
                   spec: OverlaySpec = OverlaySpec()) -> tuple[np.ndarray, dict]:
    """Colour TP/FN/FP over a grey copy of ``image``; returns the RGB array and its legend."""
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    grey = (np.clip(np.asarray(image, np.float64).mean(-1), 0, 1) * 255).round().astype(np.uint8)
    rgb = np.repeat(grey[..., None], 3, -1)
    rgb[pred & gt] = spec.tp
    rgb[~pred & gt] = spec.fn
    rgb[pred & ~gt] = spec.fp
    h, w = grey.shape
    canvas = Image.fromarray(np.concatenate([np.zeros((spec.band_height, w, 3), np.uint8), rgb]))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default_imagefont()   # bitmap font: exact metrics, no grey ink
    counts = confusion(pred, gt)
    notes = spec.annotations(dice(counts), iou_hard(counts))
    for corner, text in notes.items():
        x = 2 if corner.endswith("left") else max(2, w - 2 - int(draw.textlength(text, font=font)))
        draw.text((x, 1), text, fill=(255, 255, 255), font=font)
    out = np.array(canvas)
    out[spec.band_height:] = rgb    # text never spills into the image area
    legend = {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn,
              "dice": dice(counts), "iou": iou_hard(counts), "annotations": notes,
              "colors": {"tp": list(spec.tp), "fn": list(spec.fn), "fp": list(spec.fp)},
              "band_height": spec.band_height}
    return out, legend


def count_colours(overlay: np.ndarray, spec: OverlaySpec = OverlaySpec()) -> dict[str, int]:
    flat = overlay.reshape(-1, 3)
    return {k: int(np.all(flat == getattr(spec, k), axis=1).sum()) for k in ("tp", "fn", "fp")}


# ---------------------------------------------------------------------------
# Tables and figures
# ---------------------------------------------------------------------------

def _fmt(value, width=9) -> str:
    if value is None:
        return f"{'-':>{width}}"
    return f"{value:>{width}.3f}"


def class_table_text(report, network: str, split: str, loss: str | None, params: int) -> str:
    rows = (("mIoU", "miou"), ("mSn", "msn"), ("mSp", "msp"), ("mDice", "mdice"), ("AUC", "auc"))
    lines = [f"{network} on {split} (n={report.overall.n})",
             f"{'metric':<8}" + "".join(f"{g:>9}" for g in GROUPS)]
    for label, attr in rows:
        cells = [_fmt(getattr(report.groups[g], attr)) if g in report.groups else _fmt(None)
                 for g in GROUPS]
        lines.append(f"{label:<8}" + "".join(cells))
    key, ref = reference_for_split(split)
    lines += ["", f"published DSNet reference ({key})",
              f"{'metric':<8}" + "".join(f"{g:>9}" for g in GROUPS)]
    for label, per_group in ref.items():
        lines.append(f"{label:<8}" + "".join(_fmt(per_group.get(g)) for g in GROUPS))
    lines += ["", "network comparison (published rows on the ISIC-2017 test split)",
              f"{'network':<10}{'params':>10}  {'loss':<15}{'mIoU':>7}{'mSn':>7}{'mSp':>7}"]
    for net, p, lo, miou, msn, msp in NETWORK_TABLE:
        lines.append(f"{net:<10}{p:>10}  {lo:<15}{miou:>7.3f}{msn:>7.3f}{msp:>7.3f}")
    o = report.overall
    lines.append(f"{network + ' (run)':<10}{params / 1e6:>9.2f}M  {loss or '?':<15}"
                 f"{o.miou:>7.3f}{o.msn:>7.3f}{o.msp:>7.3f}")
    return "\n".join(lines) + "\n"


def parse_class_table_text(text: str) -> dict[str, dict[str, float | None]]:
    """Read back the local-results block of :func:`class_table_text` as group -> metric -> value."""
    lines = text.splitlines()
    header = lines[1].split()[1:]
    table: dict[str, dict[str, float | None]] = {g: {} for g in header}
    for line in lines[2:]:
        if not line.strip():
            break
        label, *cells = line.split()
        for g, c in zip(header, cells):
            table[g][label] = None if c == "-" else float(c)
    return table


def thin_curve(curve: RocCurve, max_points: int = ROC_TEXT_POINTS) -> RocCurve:
    n = len(curve.fpr)
    if n <= max_points:
        return curve
    idx = np.unique(np.linspace(0, n - 1, max_points).round().astype(int))
    return RocCurve(curve.fpr[idx], curve.tpr[idx], curve.thresholds[idx])


def plot_roc(curves: list[tuple[str, RocCurve]], path: Path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, c in curves:
        ax.plot(c.fpr, c.tpr, label=label)
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="chance")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1),
           title=title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_history(history: list[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], label="train")
    if any(h["val_loss"] is not None for h in history):
        ax.plot(epochs, [h["val_loss"] for h in history], label="validation")
    ax.set(xlabel="epoch", ylabel="loss", title="training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_prepare(raw, target) -> list[dict]:
    summaries = prepare(raw, target)
    for s in summaries:
        props = ", ".join(f"{k} {v:.1%}" for k, v in (s.get("class_proportions") or {}).items())
        print(f"{s['split']}: {s['count']} images ({s['layout']} layout) {props}")
    return summaries


def cmd_train(cfg: RunConfig) -> dict:
    _require(cfg, "data_root", "split")
    tcfg = cfg.training_config()
    out = _out_dir(cfg.out)
    train_m = load_manifest(cfg.data_root, cfg.split)
    val_m = load_manifest(cfg.data_root, cfg.val_split) if cfg.val_split else None
    handle = build_network(cfg)
    handle, state = train(handle, train_m, val_m, tcfg, out)
    if not (out / "best.ckpt").exists():     # zero epochs: keep the initial weights
        save_checkpoint(handle, out / "best.ckpt", {"epoch": 0, "loss": cfg.loss})
    if state.history:
        plot_history(state.history, out / "loss_curve.png")
    params = count_parameters(handle.network).total
    run = {"config": dataclasses.asdict(cfg), "network": cfg.network, "params": params,
           "split": cfg.split, "epochs_run": state.epoch, "final_lr": state.lr,
           "final": state.history[-1] if state.history else None}
    _write_json(out / "run.json", run)
    last = state.history[-1]["train_loss"] if state.history else float("nan")
    print(f"trained {cfg.network} for {state.epoch} epochs: train loss {last:.4f}, "
          f"{params:,} parameters -> {out / 'best.ckpt'}")
    return run


def cmd_evaluate(cfg: RunConfig, network_given: bool = False) -> dict:
    _require(cfg, "data_root", "split")
    handle, meta = open_checkpoint(cfg, network_given)
    out = _out_dir(cfg.out)
    manifest = load_manifest(cfg.data_root, cfg.split)
    samples = load_samples(manifest, handle.input_shape[:2])
    report = evaluate(handle, samples, cfg.batch_size, cfg.auc_mode)
    curve, pooled_auc = pooled_roc(handle, samples, cfg.batch_size)
    params = count_parameters(handle.network).total
    loss = (meta or {}).get("loss")

    (out / "per_image.csv").write_text(report.per_image_csv())
    (out / "class_table.csv").write_text(report.class_table_csv())
    (out / "class_table.txt").write_text(
        class_table_text(report, handle.name, cfg.split, loss, params))
    (out / "roc.txt").write_text(thin_curve(curve).to_text())
    plot_roc([(f"{handle.name} (AUC {pooled_auc:.3f})", curve)], out / "roc.png",
             f"ROC on {cfg.split}")
    summary = {"network": handle.name, "params": params, "loss": loss, "split": cfg.split,
               "data_root": str(cfg.data_root), "checkpoint": str(cfg.checkpoint),
               "n_images": len(samples), "ids_sha256": ids_fingerprint(manifest.ids()),
               "pooled_auc": pooled_auc, "report": report.to_dict()}
    _write_json(out / "report.json", summary)
    o = report.overall
    print(f"{handle.name} on {cfg.split}: mIoU {o.miou:.3f} mSn {o.msn:.3f} mSp {o.msp:.3f} "
          f"mDice {o.mdice:.3f} AUC {_fmt(o.auc, 0).strip()} ({len(samples)} images)")
    return summary


def _predict_inputs(cfg: RunConfig, images: list[str], gt_dir) -> list[tuple[str, Path, Path | None]]:
    items = []
    for p in map(Path, images):
        gt = Path(gt_dir) / f"{p.stem}{MASK_SUFFIX}" if gt_dir else None
        if gt is None:
            conventional = p.parent.parent / "masks" / f"{p.stem}{MASK_SUFFIX}"
            gt = conventional if p.parent.name == "images" and conventional.exists() else None
        elif not gt.exists():
            gt = None
        items.append((p.stem, p, gt))
    if cfg.data_root and cfg.split:
        for r in load_manifest(cfg.data_root, cfg.split).records:
            items.append((r.id, r.image_path, r.mask_path))
    if not items:
        raise UsageError("predict needs image paths or --data-root with --split")
    return items


def cmd_predict(cfg: RunConfig, images: list[str], gt_dir=None,
                network_given: bool = False) -> dict:
    handle, _ = open_checkpoint(cfg, network_given)
    items = _predict_inputs(cfg, images, gt_dir)
    out = _out_dir(cfg.out)
    size = handle.input_shape[:2]
    spec = OverlaySpec()
    seconds, overlays = [], 0
    for image_id, image_path, gt_path in items:
        gt = read_mask(gt_path) if gt_path is not None else None
        x, m = canonicalize(read_image(image_path), gt, size)
        t0 = time.perf_counter()
        probs = forward(handle, x[None])[0, ..., 0]
        seconds.append(time.perf_counter() - t0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mask = postprocess(probs)
        np.save(out / f"{image_id}_prob.npy", probs.astype(np.float32))
        write_mask(mask, out / f"{image_id}_mask.png")
        if m is not None:
            overlay, legend = render_overlay(x, mask, m, spec)
            Image.fromarray(overlay).save(out / f"{image_id}_overlay.png")
            _write_json(out / f"{image_id}_overlay.json", {"id": image_id, **legend})
            overlays += 1
    mean = float(np.mean(seconds))
    summary = {"n_images": len(items), "overlays": overlays, "seconds_per_image": mean,
               "published_seconds_per_image": SECONDS_PER_IMAGE}
    _write_json(out / "predict_summary.json", summary)
    print(f"predicted {len(items)} images ({overlays} with ground truth): mean inference "
          f"{mean:.4f} s/image (published reference {SECONDS_PER_IMAGE} s)")
    return summary


def cmd_compare(run_dirs: list[str], out) -> list[dict]:
    if len(run_dirs) < 2:
        raise UsageError("compare needs at least two evaluated runs")
    runs = []
    for d in map(Path, run_dirs):
        report = d / "report.json"
        if not report.exists():
            raise DataError(f"{d} has no report.json; run `dsnet evaluate --out {d}` first")
        runs.append((d, json.loads(report.read_text())))
    splits = {(r["split"], r["ids_sha256"]) for _, r in runs}
    if len(splits) > 1:
        listing = "; ".join(f"{d}: {r['split']} ({r['ids_sha256'][:8]})" for d, r in runs)
        raise UsageError(f"runs were evaluated on different test splits: {listing}")
    out = _out_dir(out)
    rows = []
    for d, r in runs:
        overall = r["report"]["groups"]["overall"]
        rows.append({"run": d.name, "network": r["network"], "loss": r.get("loss"),
                     "params": r["params"], "miou": overall["miou"], "msn": overall["msn"],
                     "msp": overall["msp"], "mdice": overall["mdice"], "auc": r["pooled_auc"]})
    rows.sort(key=lambda row: -row["miou"])
    header = ["rank", "run", "network", "loss", "params", "mIoU", "mSn", "mSp", "mDice", "AUC"]
    csv_lines = [",".join(header)]
    text = [f"{'rank':<5}{'run':<16}{'network':<8}{'loss':<15}{'params':>13}"
            f"{'mIoU':>8}{'mSn':>8}{'mSp':>8}{'mDice':>8}{'AUC':>8}"]
    for i, row in enumerate(rows, 1):
        metrics = [row[k] for k in ("miou", "msn", "msp", "mdice", "auc")]
        csv_lines.append(",".join([str(i), row["run"], row["network"], row["loss"] or "",
                                   str(row["params"])] + [f"{v:.6f}" for v in metrics]))
        text.append(f"{i:<5}{row['run'][:15]:<16}{row['network']:<8}{row['loss'] or '?':<15}"
                    f"{row['params']:>13,}" + "".join(f"{v:>8.3f}" for v in metrics))
    (out / "compare.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "compare.txt").write_text("\n".join(text) + "\n")
    curves = [(f"{r['network']} {d.name} (AUC {r['pooled_auc']:.3f})",
               RocCurve.from_text((d / "roc.txt").read_text())) for d, r in runs]
    plot_roc(curves, out / "roc_compare.png", f"ROC on {runs[0][1]['split']}")
    print("\n".join(text))
    return rows


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *flags: str) -> None:
    table = {
        "data-root": dict(help="normalised dataset root"),
        "split": dict(help="split directory under the data root"),
        "network": dict(help=f"one of {', '.join(NETWORKS)}"),
        "loss": dict(help=f"one of {', '.join(LOSSES)}"),
        "epochs": dict(type=int),
        "batch-size": dict(type=int),
        "seed": dict(type=int),
        "out": dict(help="output directory"),
        "checkpoint": dict(help="checkpoint archive"),
        "encoder-weights": dict(help="encoder weight archive for dsnet"),
    }
    for f in flags:
        p.add_argument(f"--{f}", **table[f])
    p.add_argument("--config", help="YAML or JSON file of defaults; flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsnet", description="Skin lesion segmentation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="normalise a raw ISIC-2017 or PH2 download")
    p.add_argument("raw", help="raw download (or an already normalised root)")
    p.add_argument("--out", required=True, help="target dataset root")

    p = sub.add_parser("train", help="train a network")
    _common(p, "data-root", "split", "network", "loss", "epochs", "batch-size", "seed", "out",
            "encoder-weights")
    p.add_argument("--val-split", help="split monitored by the learning-rate schedule")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    _common(p, "data-root", "split", "network", "batch-size", "out", "checkpoint")
    p.add_argument("--auc-mode", choices=("pooled", "per_image"))

    p = sub.add_parser("predict", help="write masks and overlays for images")
    _common(p, "data-root", "split", "network", "out", "checkpoint")
    p.add_argument("images", nargs="*", help="image files")
    p.add_argument("--gt-dir", help="directory of <id>_segmentation.png ground truth")

    p = sub.add_parser("compare", help="rank evaluated runs")
    p.add_argument("runs", nargs="*", help="evaluate output directories")
    p.add_argument("--out", required=True)
    return parser


_FLAG_KEYS = ("data_root", "split", "val_split", "network", "loss", "epochs", "batch_size",
              "seed", "out", "checkpoint", "encoder_weights", "height", "width", "augment",
              "auc_mode")


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "prepare":
        cmd_prepare(args.raw, args.out)
        return EXIT_OK
    if args.command == "compare":
        cmd_compare(args.runs, args.out)
        return EXIT_OK
    flags = {k: getattr(args, k) for k in _FLAG_KEYS if hasattr(args, k)}
    cfg = RunConfig.from_sources(args.command, flags, args.config)
    network_given = args.network is not None
    if args.command == "train":
        cmd_train(cfg)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, network_given)
    else:
        cmd_predict(cfg, args.images, args.gt_dir, network_given)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (UsageError, SpecError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, WeightLoadError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, CheckpointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is a runtime failure
        log.debug("unhandled exception", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
