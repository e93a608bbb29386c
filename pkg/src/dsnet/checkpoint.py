"""Single-file weight archives.

An archive is a zip holding ``manifest.json`` (layer name -> shape/dtype plus
optional builder config and metadata) and ``tensors.npz``. Shapes are checked
against the target module before any tensor is copied.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT = "dsnet-archive/1"


class WeightLoadError(ValueError):
    """Archive contents do not fit the target network."""


def save_archive(tensors: dict[str, torch.Tensor], path, config: dict | None = None,
                 metadata: dict | None = None) -> Path:
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy() for k, v in tensors.items()}
    manifest = {
        "format": FORMAT,
        "config": config,
        "metadata": metadata or {},
        "tensors": {k: {"shape": list(a.shape), "dtype": str(a.dtype)} for k, a in arrays.items()},
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=1))
            zf.writestr("tensors.npz", buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise WeightLoadError(f"{path}: not a weight archive ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise WeightLoadError(f"{path}: unsupported archive format {manifest.get('format')!r}")
    return manifest


def read_tensors(path) -> dict[str, np.ndarray]:
    with zipfile.ZipFile(path) as zf:
        with np.load(io.BytesIO(zf.read("tensors.npz"))) as npz:
            return {k: npz[k] for k in npz.files}


def validate_manifest(module: nn.Module, manifest: dict, strict: bool = True) -> None:
    """Raise naming the first layer (in module order) whose shape disagrees."""
    entries = manifest["tensors"]
    state = module.state_dict()
    for name, tensor in state.items():
        if name not in entries:
            if strict:
                raise WeightLoadError(f"layer {name!r} missing from archive")
            continue
        shape = tuple(entries[name]["shape"])
        if shape != tuple(tensor.shape):
            raise WeightLoadError(
                f"shape mismatch at layer {name!r}: archive {shape}, network {tuple(tensor.shape)}")
    if strict:
        extra = [k for k in entries if k not in state]
        if extra:
            raise WeightLoadError(f"archive holds unknown layer {extra[0]!r}")


def load_weights(module: nn.Module, path, strict: bool = True) -> dict:
    manifest = read_manifest(path)
    validate_manifest(module, manifest, strict)
    arrays = read_tensors(path)
    state = {k: torch.from_numpy(v) for k, v in arrays.items() if k in module.state_dict()}
    module.load_state_dict(state, strict=strict)
    return manifest


def save_checkpoint(handle, path, metadata: dict | None = None) -> Path:
    return save_archive(handle.network.state_dict(), path, handle.builder_config(), metadata)


def load_checkpoint(path, network: str | None = None):
    """Rebuild the network recorded in the archive and load its weights."""
    from .model import build_from_config

    manifest = read_manifest(path)
    config = manifest.get("config")
    if not config:
        raise WeightLoadError(f"{path}: archive has no network config (weights-only archive?)")
    if network is not None and config["network"] != network:
        raise WeightLoadError(
            f"{path}: checkpoint holds a {config['network']} network, not {network}")
    handle = build_from_config(config)
    load_weights(handle.network, path)
    handle.network.eval()
    return handle, manifest.get("metadata", {})


def export_encoder_weights(state_dict: dict[str, torch.Tensor], path) -> Path:
    """Write an encoder-only archive from a DenseNet-style ``features.*`` state dict.

    Classifier entries are dropped so e.g. an ImageNet DenseNet-121 state dict
    can be converted directly.
    """
    tensors = {k: v for k, v in state_dict.items() if k.startswith("features.")}
    if not tensors:
        raise WeightLoadError("state dict has no 'features.*' entries")
    return save_archive(tensors, path, None, {"kind": "encoder"})
