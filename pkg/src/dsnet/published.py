"""Published reference figures, shown next to local results for context only.

They come from full-dataset GPU training and are never asserted by tests.
"""

# (network, parameters, loss, mIoU, mSn, mSp) on the ISIC-2017 test split
NETWORK_TABLE = [
    ("FCN8s", "138 M", "cross_entropy", 0.688, 0.926, 0.893),
    ("FCN8s", "138 M", "iou", 0.658, 0.718, 0.965),
    ("FCN8s", "138 M", "combined", 0.707, 0.858, 0.938),
    ("U-Net", "38 M", "cross_entropy", 0.717, 0.900, 0.933),
    ("U-Net", "38 M", "iou", 0.693, 0.719, 0.986),
    ("U-Net", "38 M", "combined", 0.739, 0.785, 0.982),
    ("DSNet", "10 M", "cross_entropy", 0.771, 0.832, 0.977),
    ("DSNet", "10 M", "iou", 0.743, 0.782, 0.984),
    ("DSNet", "10 M", "combined", 0.775, 0.875, 0.955),
]

# per-class DSNet results; keys follow the class-table rows
CLASS_TABLE = {
    "isic": {
        "mIoU": {"nev": 0.808, "mel": 0.730, "sk": 0.684, "overall": 0.775},
        "mSn": {"nev": 0.907, "mel": 0.836, "sk": 0.832, "overall": 0.875},
        "mSp": {"nev": 0.956, "mel": 0.939, "sk": 0.953, "overall": 0.955},
        "AUC": {"nev": 0.970, "mel": 0.928, "sk": 0.917, "overall": 0.953},
    },
    "ph2": {
        "mIoU": {"nev": 0.891, "mel": 0.835, "overall": 0.870},
        "mSn": {"nev": 0.945, "mel": 0.929, "overall": 0.929},
        "mSp": {"nev": 0.976, "mel": 0.849, "overall": 0.969},
        "AUC": {"nev": 0.996, "mel": 0.955, "overall": 0.987},
    },
}

SECONDS_PER_IMAGE = 0.595


def reference_for_split(split: str) -> tuple[str, dict]:
    key = "ph2" if split.lower().startswith("ph2") else "isic"
    return key, CLASS_TABLE[key]
