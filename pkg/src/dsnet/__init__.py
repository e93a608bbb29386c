"""Densely connected encoder-decoder for skin lesion segmentation."""
from .losses import bce, get_loss, l_seg, soft_iou
from .metrics import MetricsReport, confusion, dice, iou_hard, roc_and_auc
from .model import NetworkSpec, build_dsnet, build_fcn8s, build_model, build_unet, forward
from .postprocess import isodata_threshold, largest_connected_component

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec", "build_dsnet", "build_unet", "build_fcn8s", "build_model", "forward",
    "bce", "soft_iou", "l_seg", "get_loss",
    "confusion", "iou_hard", "dice", "roc_and_auc", "MetricsReport",
    "isodata_threshold", "largest_connected_component",
]
