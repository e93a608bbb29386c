"""Segmentation losses: binary cross-entropy, soft IoU and their sum.

All three operate on flattened pixel vectors. Passing batched tensors pools
every pixel of the batch into one vector.
"""
from __future__ import annotations

import numpy as np
import torch

EPSILON = 1e-7


def _as_pair(y, y_hat) -> tuple[torch.Tensor, torch.Tensor]:
    if not isinstance(y_hat, torch.Tensor):
        y_hat = torch.as_tensor(np.asarray(y_hat, dtype=np.float64))
    if not isinstance(y, torch.Tensor):
        y = torch.as_tensor(np.asarray(y, dtype=np.float64))
    y = y.to(y_hat.dtype)
    if y.numel() != y_hat.numel():
        raise ValueError(f"length mismatch: {y.numel()} labels vs {y_hat.numel()} predictions")
    if y.numel() == 0:
        raise ValueError("empty pixel vectors")
    return y.reshape(-1), y_hat.reshape(-1)


def bce(y, y_hat, eps: float = EPSILON) -> torch.Tensor:
    y, y_hat = _as_pair(y, y_hat)
    p = y_hat.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def soft_iou(y, y_hat) -> torch.Tensor:
    y, y_hat = _as_pair(y, y_hat)
    inter = (y * y_hat).sum()
    union = y.sum() + y_hat.sum() - inter
    if union.item() == 0:
        # empty foreground on both sides counts as perfect agreement
        return torch.ones((), dtype=y_hat.dtype) + 0 * y_hat.sum()
    return inter / union


def iou_loss(y, y_hat) -> torch.Tensor:
    return 1 - soft_iou(y, y_hat)


def l_seg(y, y_hat, eps: float = EPSILON) -> torch.Tensor:
    """Cross-entropy plus (1 - soft IoU)."""
    return bce(y, y_hat, eps) + iou_loss(y, y_hat)


LOSSES = {
    "cross_entropy": bce,
    "iou": iou_loss,
    "combined": l_seg,
}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSSES)}") from None


def l_seg_grad(y, y_hat, eps: float = EPSILON) -> np.ndarray:
    """Closed-form d l_seg / d y_hat for a flat vector."""
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.asarray(y_hat, dtype=np.float64).ravel()
    n = p.size
    inside = (p > eps) & (p < 1 - eps)
    g_bce = np.where(inside, (-y / p + (1 - y) / (1 - p)) / n, 0.0)
    inter = np.sum(y * p)
    union = np.sum(y) + np.sum(p) - inter
    if union == 0:
        return g_bce
    # d(I/U)/dp_i = (y_i * U - I * (1 - y_i)) / U^2
    g_iou = (y * union - inter * (1 - y)) / union ** 2
    return g_bce - g_iou
