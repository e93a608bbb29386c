"""Optimisation (adadelta + plateau schedule), training loop and evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import DatasetManifest, ImageSample, AugmentationParams, iter_batches, load_samples
from .initializers import init_he_normal  # noqa: F401  (re-exported)
from .losses import get_loss
from .metrics import (CLASSES, MetricsReport, UndefinedAUCError, aggregate_report, image_record,
                      roc_and_auc)
from .model import ModelHandle, forward
from .postprocess import (DegenerateMapWarning, EmptyPredictionWarning, IsodataCapWarning,
                          postprocess)

log = logging.getLogger(__name__)

ADADELTA_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be written."""


@dataclass
class TrainingConfig:
    initial_learning_rate: float = 1.0
    decay_rho: float = 0.95
    plateau_patience: int = 8
    plateau_factor: float = 0.6
    min_delta: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 16
    loss: str = "combined"
    augment: bool = True
    augmentation: AugmentationParams = field(default_factory=AugmentationParams)
    seed: int = 0
    restore_best: bool = False

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        get_loss(self.loss)


@dataclass
class TrainingState:
    epoch: int = 0
    lr: float = 1.0
    initial_lr: float = 1.0
    reductions: int = 0
    best: float = math.inf
    wait: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def start(cls, config: TrainingConfig) -> "TrainingState":
        lr = config.initial_learning_rate
        return cls(lr=lr, initial_lr=lr)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TrainingState":
        d = json.loads(text)
        d["best"] = math.inf if d["best"] is None else d["best"]
        return cls(**d)


# ---------------------------------------------------------------------------
# Optimiser and schedule
# ---------------------------------------------------------------------------

def adadelta_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None],
                  state: dict, lr: float = 1.0, rho: float = 0.95,
                  eps: float = ADADELTA_EPS, names: Sequence[str] | None = None):
    """One adadelta update, in place.

    ``state`` holds the running averages ``square_avg`` (gradients) and
    ``acc_delta`` (updates), created on first use. The unscaled update feeds
    ``acc_delta``; ``lr`` only scales the step applied to the parameters.
    """
    if "square_avg" not in state:
        state["square_avg"] = [torch.zeros_like(p) for p in params]
        state["acc_delta"] = [torch.zeros_like(p) for p in params]
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                name = names[i] if names else f"#{i}"
                raise TrainingDivergedError(
                    f"non-finite gradient in parameter {name} (shape {tuple(p.shape)}, "
                    f"{int((~torch.isfinite(g)).sum())} bad entries)")
            sq, acc = state["square_avg"][i], state["acc_delta"][i]
            sq.mul_(rho).addcmul_(g, g, value=1 - rho)
            delta = (acc + eps).sqrt_().div_((sq + eps).sqrt_()).mul_(g)
            acc.mul_(rho).addcmul_(delta, delta, value=1 - rho)
            p.sub_(delta, alpha=lr)
    return params


class Adadelta(torch.optim.Optimizer):
    def __init__(self, params, lr: float = 1.0, rho: float = 0.95, eps: float = ADADELTA_EPS):
        super().__init__(params, dict(lr=lr, rho=rho, eps=eps))

    @torch.no_grad()
    def step(self, closure: Callable | None = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for i, group in enumerate(self.param_groups):
            params = group["params"]
            st = self.state.setdefault(f"group{i}", {})
            adadelta_step(params, [p.grad for p in params], st, group["lr"], group["rho"],
                          group["eps"])
        return loss

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr


def plateau_scheduler(state: TrainingState, value: float,
                      patience: int = 8, factor: float = 0.6,
                      min_delta: float = 1e-4) -> TrainingState:
    """Return the state after observing one monitored value.

    A value counts as an improvement when it is more than ``min_delta`` below
    the best so far. After ``patience`` consecutive non-improving values the
    learning rate drops by ``factor`` and the counter restarts.
    """
    best, wait, reductions = state.best, state.wait, state.reductions
    if value < best - min_delta:
        best, wait = value, 0
    else:
        wait += 1
        if wait >= patience:
            reductions += 1
            wait = 0
    return dataclasses.replace(state, best=best, wait=wait, reductions=reductions,
                               lr=state.initial_lr * factor ** reductions)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _as_samples(data, handle: ModelHandle) -> list[ImageSample]:
    if isinstance(data, DatasetManifest):
        h, w, _ = handle.input_shape
        return load_samples(data, (h, w))
    return list(data)


def _to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()


def batch_loss(handle: ModelHandle, samples: Sequence[ImageSample], loss_name: str,
               batch_size: int = 16) -> float:
    """Mean per-batch loss in inference mode."""
    loss_fn = get_loss(loss_name)
    total, count = 0.0, 0
    for images, masks in iter_batches(samples, batch_size, None, shuffle=False):
        probs = torch.from_numpy(forward(handle, images))
        total += float(loss_fn(torch.from_numpy(masks), probs)) * len(images)
        count += len(images)
    return total / count


def train(handle: ModelHandle, train_data, val_data=None, config: TrainingConfig | None = None,
          out_dir=None, on_epoch: Callable[[TrainingState], None] | None = None
          ) -> tuple[ModelHandle, TrainingState]:
    """Minimise the configured loss with adadelta and a plateau learning-rate schedule.

    The monitored quantity is the validation loss, or the training loss when
    no validation data is given. With ``out_dir`` the best model is written to
    ``best.ckpt`` and the state to ``history.json`` after every epoch.
    """
    config = config or TrainingConfig()
    train_samples = _as_samples(train_data, handle)
    val_samples = _as_samples(val_data, handle) if val_data is not None else None
    if not train_samples:
        raise ValueError("empty training set")
    if val_samples is not None and not val_samples:
        raise ValueError("empty validation set")
    expected = handle.input_shape[:2]
    for s in train_samples[:1] + (val_samples or [])[:1]:
        if s.mask is None or s.mask.shape != expected:
            raise ValueError(f"sample {s.id}: mask shape {None if s.mask is None else s.mask.shape}"
                             f" does not match network output {expected}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    net = handle.network
    loss_fn = get_loss(config.loss)
    opt = Adadelta(net.parameters(), lr=config.initial_learning_rate, rho=config.decay_rho)
    state = TrainingState.start(config)
    aug = config.augmentation if config.augment else None
    best_ckpt = math.inf
    best_weights = None

    for epoch in range(config.max_epochs):
        opt.set_lr(state.lr)
        net.train()
        total, count = 0.0, 0
        for images, masks in iter_batches(train_samples, config.batch_size, aug,
                                          config.seed, epoch):
            x, y = _to_nchw(images), _to_nchw(masks)
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(y, net(x))
            if not torch.isfinite(loss):
                _dump(out_dir, state)
                raise TrainingDivergedError(f"loss became {loss.item()} at epoch {epoch}")
            loss.backward()
            try:
                opt.step()
            except TrainingDivergedError:
                _dump(out_dir, state)
                raise
            total += loss.item() * len(images)
            count += len(images)
        train_loss = total / count

        val_loss = val_miou = None
        if val_samples is not None:
            val_loss = batch_loss(handle, val_samples, config.loss, config.batch_size)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                val_miou = evaluate(handle, val_samples, config.batch_size,
                                    compute_auc=False).overall.miou
        monitored = val_loss if val_loss is not None else train_loss
        lr_used = state.lr
        state = plateau_scheduler(state, monitored, config.plateau_patience,
                                  config.plateau_factor, config.min_delta)
        state.epoch = epoch + 1
        state.history.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss,
                              "val_miou": val_miou, "lr": lr_used})
        log.info("epoch %d: train %.5f val %s lr %.4g", epoch + 1, train_loss, val_loss, lr_used)

        if monitored < best_ckpt:
            best_ckpt = monitored
            if config.restore_best:
                best_weights = {k: v.detach().clone() for k, v in net.state_dict().items()}
            if out_dir is not None:
                _save(handle, out_dir / "best.ckpt",
                      {"epoch": epoch + 1, "monitored": monitored, "loss": config.loss})
        if out_dir is not None:
            _write_text(out_dir / "history.json", state.to_json())
        if on_epoch is not None:
            on_epoch(state)

    if best_weights is not None:
        net.load_state_dict(best_weights)
    net.eval()
    return handle, state


def _save(handle, path: Path, metadata: dict) -> None:
    try:
        save_checkpoint(handle, path, metadata)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CheckpointError(f"could not write {path}: {exc}") from exc


def _dump(out_dir: Path | None, state: TrainingState) -> None:
    if out_dir is None:
        return
    try:
        (out_dir / "diverged_state.json").write_text(state.to_json())
    except OSError:
        log.exception("could not dump training state")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    id: str
    probs: np.ndarray     # (H, W)
    mask: np.ndarray      # (H, W) uint8
    seconds: float


def predict_samples(handle: ModelHandle, samples: Sequence[ImageSample], batch_size: int = 8,
                    warning_counts: Counter | None = None) -> list[Prediction]:
    out = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        images = np.stack([s.image for s in batch]).astype(np.float32)
        t0 = time.perf_counter()
        probs = forward(handle, images)[..., 0]
        per_image = (time.perf_counter() - t0) / len(batch)
        for s, p in zip(batch, probs):
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                mask = postprocess(p)
            if warning_counts is not None:
                for w in caught:
                    warning_counts[w.category.__name__] += 1
            out.append(Prediction(s.id, p, mask, per_image))
    return out


def evaluate(handle: ModelHandle, data, batch_size: int = 8, auc_mode: str = "pooled",
             compute_auc: bool = True) -> MetricsReport:
    """forward -> postprocess -> per-image metrics -> class-stratified report."""
    if auc_mode not in ("pooled", "per_image"):
        raise ValueError(f"unknown auc_mode {auc_mode!r}")
    samples = _as_samples(data, handle)
    if not samples:
        raise ValueError("nothing to evaluate")
    if any(s.mask is None for s in samples):
        raise ValueError("evaluation needs ground-truth masks for every sample")
    counts: Counter = Counter()
    preds = predict_samples(handle, samples, batch_size, counts)
    records = []
    pooled: dict[str, list] = {g: [[], []] for g in CLASSES + ("overall",)}
    for s, p in zip(samples, preds):
        per_image_probs = p.probs if (compute_auc and auc_mode == "per_image") else None
        records.append(image_record(s.id, s.class_label, p.mask, s.mask, per_image_probs))
        if compute_auc and auc_mode == "pooled":
            for g in ("overall", s.class_label):
                if g is not None:
                    pooled[g][0].append(p.probs.ravel())
                    pooled[g][1].append(s.mask.ravel())
    auc = {}
    if compute_auc and auc_mode == "pooled":
        for g, (probs, labels) in pooled.items():
            if not probs:
                continue
            try:
                _, auc[g] = roc_and_auc(np.concatenate(probs), np.concatenate(labels))
            except UndefinedAUCError:
                auc[g] = None
    report = aggregate_report(records, auc, auc_mode)
    report.seconds_per_image = float(np.mean([p.seconds for p in preds]))
    report.meta["warnings"] = dict(counts)
    for name, n in counts.items():
        warnings.warn(f"{n} of {len(samples)} images raised {name} during post-processing",
                      _warning_class(name), stacklevel=2)
    log.info("evaluated %d images, %.4f s/image", len(samples), report.seconds_per_image)
    return report


_WARNINGS = {w.__name__: w for w in (DegenerateMapWarning, EmptyPredictionWarning,
                                      IsodataCapWarning)}


def _warning_class(name: str):
    return _WARNINGS.get(name, UserWarning)


def pooled_roc(handle: ModelHandle, samples: Sequence[ImageSample], batch_size: int = 8):
    """Pooled-pixel ROC curve and AUC over ``samples``."""
    probs, labels = [], []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        p = forward(handle, np.stack([s.image for s in batch]))[..., 0]
        probs.extend(x.ravel() for x in p)
        labels.extend(s.mask.ravel() for s in batch)
    return roc_and_auc(np.concatenate(probs), np.concatenate(labels))
