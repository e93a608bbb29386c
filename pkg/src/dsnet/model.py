"""Segmentation networks: DSNet plus the U-Net and FCN8s baselines.

Every network consumes ``(B, 3, H, W)`` tensors internally and ends in a
single-channel sigmoid. The public :func:`forward` helper speaks the
channels-last ``(B, H, W, C)`` layout used by the data pipeline.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .initializers import he_normal_

DECODER_CONV_KINDS = ("standard", "depthwise_separable")


class SpecError(ValueError):
    """Invalid network settings."""


class ShapeError(ValueError):
    """Input batch does not match the network's input contract."""


# ---------------------------------------------------------------------------
# Specs and cost formulas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkSpec:
    input_height: int = 192
    input_width: int = 256
    input_channels: int = 3
    growth_rate: int = 32
    block_layout: tuple[int, ...] = (6, 12, 24, 16)
    compression: float = 0.5
    decoder_widths: tuple[int, ...] = (512, 256, 128, 64, 32)
    tap_names: tuple[str, ...] = ("conv1", "pool1", "pool2", "pool3")
    decoder_conv_kind: str = "depthwise_separable"
    stem_channels: int = 64
    bottleneck_factor: int = 4

    def __post_init__(self):
        # accept lists from JSON/YAML round-trips
        for name in ("block_layout", "decoder_widths", "tap_names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.tap_names) + 1)

    def validate(self) -> "NetworkSpec":
        if not self.block_layout or any(n < 1 for n in self.block_layout):
            raise SpecError(f"block_layout entries must be >= 1: {self.block_layout}")
        if self.growth_rate < 1:
            raise SpecError(f"growth_rate must be >= 1: {self.growth_rate}")
        if not 0 < self.compression <= 1:
            raise SpecError(f"compression must lie in (0, 1]: {self.compression}")
        if len(self.block_layout) < 2:
            raise SpecError("need at least two dense blocks")
        if len(self.tap_names) != len(self.block_layout):
            raise SpecError(
                f"{len(self.block_layout)} dense blocks export exactly "
                f"{len(self.block_layout)} taps, got {len(self.tap_names)}")
        if len(set(self.tap_names)) != len(self.tap_names):
            raise SpecError(f"duplicate tap names: {self.tap_names}")
        if len(self.decoder_widths) != len(self.tap_names) + 1:
            raise SpecError(
                f"decoder needs len(tap_names) + 1 = {len(self.tap_names) + 1} "
                f"widths, got {len(self.decoder_widths)}")
        if any(w < 1 for w in self.decoder_widths):
            raise SpecError(f"decoder widths must be >= 1: {self.decoder_widths}")
        if self.decoder_conv_kind not in DECODER_CONV_KINDS:
            raise SpecError(f"unknown decoder_conv_kind {self.decoder_conv_kind!r}")
        check_input_dims(self.input_height, self.input_width, self.downsampling)
        if self.input_channels < 1:
            raise SpecError("input_channels must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def check_input_dims(height: int, width: int, factor: int) -> None:
    if height < factor or width < factor or height % factor or width % factor:
        raise SpecError(
            f"input {height}x{width} must be a positive multiple of {factor} "
            "in both dimensions")


@dataclass(frozen=True)
class LayerCostQuery:
    n_filters: int
    input_depth: int
    kernel_size: int

    def __post_init__(self):
        for name in ("n_filters", "input_depth", "kernel_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")


def params_standard_conv(q: LayerCostQuery) -> int:
    """N_F * M_D * K^2 weights, bias excluded."""
    return q.n_filters * q.input_depth * q.kernel_size ** 2


def params_depthwise_separable(q: LayerCostQuery) -> int:
    """M_D * K^2 depthwise weights plus M_D * N_F pointwise weights."""
    return q.input_depth * (q.n_filters + q.kernel_size ** 2)


def reduction_factor(q: LayerCostQuery) -> Fraction:
    """Exact separable/standard cost ratio, 1/N_F + 1/K^2."""
    return Fraction(1, q.n_filters) + Fraction(1, q.kernel_size ** 2)


def dense_layer_input_depth(n: int, growth_rate: int, block_input_depth: int) -> int:
    """Channels entering layer ``n`` (1-based) of a dense block."""
    if n < 1 or growth_rate < 1 or block_input_depth < 1:
        raise ValueError("n, growth_rate and block_input_depth must be >= 1")
    return block_input_depth + (n - 1) * growth_rate


def dense_block_output_depth(n_layers: int, growth_rate: int, block_input_depth: int) -> int:
    return block_input_depth + n_layers * growth_rate


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class DenseLayer(nn.Module):
    """BN-ReLU-Conv1x1 bottleneck then BN-ReLU-Conv3x3 adding ``growth_rate`` maps."""

    def __init__(self, in_channels: int, growth_rate: int, bottleneck_factor: int = 4):
        super().__init__()
        self.in_channels = in_channels
        inter = bottleneck_factor * growth_rate
        self.norm1 = nn.BatchNorm2d(in_channels)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv1 = nn.Conv2d(in_channels, inter, 1, bias=False)
        self.norm2 = nn.BatchNorm2d(inter)
        self.relu2 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(inter, growth_rate, 3, padding=1, bias=False)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        x = torch.cat(features, 1)
        x = self.conv1(self.relu1(self.norm1(x)))
        return self.conv2(self.relu2(self.norm2(x)))


class DenseBlock(nn.ModuleDict):
    def __init__(self, n_layers: int, in_channels: int, growth_rate: int,
                 bottleneck_factor: int = 4):
        super().__init__()
        for i in range(n_layers):
            depth = dense_layer_input_depth(i + 1, growth_rate, in_channels)
            self[f"denselayer{i + 1}"] = DenseLayer(depth, growth_rate, bottleneck_factor)
        self.out_channels = dense_block_output_depth(n_layers, growth_rate, in_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = [x]
        for layer in self.values():
            features.append(layer(features))
        return torch.cat(features, 1)


class Transition(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.add_module("norm", nn.BatchNorm2d(in_channels))
        self.add_module("relu", nn.ReLU(inplace=True))
        self.add_module("conv", nn.Conv2d(in_channels, out_channels, 1, bias=False))
        self.add_module("pool", nn.AvgPool2d(2, stride=2))


class SeparableConv2d(nn.Module):
    """Per-channel spatial conv followed by a 1x1 pointwise projection."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.depthwise = nn.Conv2d(in_channels, in_channels, kernel_size,
                                   padding=kernel_size // 2, groups=in_channels, bias=False)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


def _decoder_conv(kind: str, in_ch: int, out_ch: int) -> nn.Module:
    if kind == "depthwise_separable":
        return SeparableConv2d(in_ch, out_ch, 3)
    return nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)


class DenseEncoder(nn.Module):
    """DenseNet-style encoder exporting skip taps.

    Submodule names follow the usual DenseNet ``features.*`` naming so that
    ImageNet weights converted from other toolkits map one-to-one.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.tap_names = spec.tap_names
        feats = nn.ModuleDict()
        feats["conv0"] = nn.Conv2d(spec.input_channels, spec.stem_channels, 7, stride=2,
                                   padding=3, bias=False)
        feats["norm0"] = nn.BatchNorm2d(spec.stem_channels)
        feats["relu0"] = nn.ReLU(inplace=True)
        feats["pool0"] = nn.MaxPool2d(3, stride=2, padding=1)
        channels = spec.stem_channels
        n_blocks = len(spec.block_layout)
        for i, n_layers in enumerate(spec.block_layout):
            block = DenseBlock(n_layers, channels, spec.growth_rate, spec.bottleneck_factor)
            feats[f"denseblock{i + 1}"] = block
            channels = block.out_channels
            if i != n_blocks - 1:
                out = int(channels * spec.compression)
                feats[f"transition{i + 1}"] = Transition(channels, out)
                channels = out
        feats["norm5"] = nn.BatchNorm2d(channels)
        self.features = feats
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        f = self.features
        taps = []
        x = f["relu0"](f["norm0"](f["conv0"](x)))
        taps.append(x)
        x = f["pool0"](x)
        taps.append(x)
        i = 1
        while f"denseblock{i}" in f:
            x = f[f"denseblock{i}"](x)
            if f"transition{i}" in f:
                x = f[f"transition{i}"](x)
                if len(taps) < len(self.tap_names):
                    taps.append(x)
            i += 1
        x = F.relu(f["norm5"](x))
        return x, dict(zip(self.tap_names, taps))


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, width: int, conv_kind: str):
        super().__init__()
        # kernel == stride: every output pixel gets exactly one contribution
        self.up = nn.ConvTranspose2d(in_channels, width, 2, stride=2, bias=False)
        self.conv1 = _decoder_conv(conv_kind, width + skip_channels, width)
        self.norm1 = nn.BatchNorm2d(width)
        self.conv2 = _decoder_conv(conv_kind, width, width)
        self.norm2 = nn.BatchNorm2d(width)

    def forward(self, x, skip=None):
        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], 1)
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class DSNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.encoder = DenseEncoder(spec)
        skip_channels = _tap_channels(spec)
        stages = []
        channels = self.encoder.out_channels
        # deepest tap first; the last stage has no skip
        skips = [skip_channels[name] for name in reversed(spec.tap_names)] + [0]
        for width, skip in zip(spec.decoder_widths, skips):
            stages.append(DecoderStage(channels, skip, width, spec.decoder_conv_kind))
            channels = width
        self.decoder = nn.ModuleList(stages)
        self.head = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        x, taps = self.encoder(x)
        names = list(reversed(self.spec.tap_names)) + [None]
        for stage, name in zip(self.decoder, names):
            x = stage(x, taps[name] if name else None)
        return torch.sigmoid(self.head(x))


def _tap_channels(spec: NetworkSpec) -> dict[str, int]:
    channels = [spec.stem_channels, spec.stem_channels]
    c = spec.stem_channels
    for n_layers in spec.block_layout[:-1]:
        c = int(dense_block_output_depth(n_layers, spec.growth_rate, c) * spec.compression)
        channels.append(c)
    return dict(zip(spec.tap_names, channels[:len(spec.tap_names)]))


def derive_tap_shapes(spec: NetworkSpec) -> dict[str, tuple[int, int, int]]:
    """(height, width, channels) of every tap, from channel arithmetic alone."""
    chans = _tap_channels(spec)
    out = {}
    for level, name in enumerate(spec.tap_names, start=1):
        s = 2 ** level
        out[name] = (spec.input_height // s, spec.input_width // s, chans[name])
    return out


def derive_bottleneck_shape(spec: NetworkSpec) -> tuple[int, int, int]:
    c = spec.stem_channels
    for i, n_layers in enumerate(spec.block_layout):
        c = dense_block_output_depth(n_layers, spec.growth_rate, c)
        if i != len(spec.block_layout) - 1:
            c = int(c * spec.compression)
    s = spec.downsampling
    return (spec.input_height // s, spec.input_width // s, c)


class DoubleConv(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """Five-level U-Net (base, 2x, 4x, 8x, 16x base channels).

    Upsampling uses 4x4 stride-2 transposed convs (kernel divisible by stride).
    """

    def __init__(self, in_channels: int = 3, base_width: int = 64, levels: int = 5,
                 up_kernel: int = 4):
        super().__init__()
        widths = [base_width * 2 ** i for i in range(levels)]
        self.down = nn.ModuleList()
        ch = in_channels
        for w in widths:
            self.down.append(DoubleConv(ch, w))
            ch = w
        self.pool = nn.MaxPool2d(2)
        self.ups = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        pad = (up_kernel - 2) // 2
        for w in reversed(widths[:-1]):
            self.ups.append(nn.ConvTranspose2d(ch, w, up_kernel, stride=2, padding=pad, bias=False))
            self.up_convs.append(DoubleConv(2 * w, w))
            ch = w
        self.head = nn.Conv2d(ch, 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, conv in zip(self.ups, self.up_convs):
            x = conv(torch.cat([up(x), skips.pop()], 1))
        return torch.sigmoid(self.head(x))


_VGG16 = [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]]


class FCN8s(nn.Module):
    """VGG16-backbone FCN with fused stride-32/16/8 score maps."""

    def __init__(self, in_channels: int = 3, fc_width: int = 4096, dropout: float = 0.5):
        super().__init__()
        self.stages = nn.ModuleList()
        ch = in_channels
        for widths in _VGG16:
            layers = []
            for w in widths:
                layers += [nn.Conv2d(ch, w, 3, padding=1), nn.ReLU(inplace=True)]
                ch = w
            layers.append(nn.MaxPool2d(2, stride=2))
            self.stages.append(nn.Sequential(*layers))
        self.fc6 = nn.Sequential(nn.Conv2d(ch, fc_width, 7, padding=3), nn.ReLU(inplace=True),
                                 nn.Dropout2d(dropout))
        self.fc7 = nn.Sequential(nn.Conv2d(fc_width, fc_width, 1), nn.ReLU(inplace=True),
                                 nn.Dropout2d(dropout))
        self.score_fr = nn.Conv2d(fc_width, 1, 1)
        self.score_pool4 = nn.Conv2d(512, 1, 1)
        self.score_pool3 = nn.Conv2d(256, 1, 1)
        self.upscore2 = nn.ConvTranspose2d(1, 1, 4, stride=2, padding=1, bias=False)
        self.upscore_pool4 = nn.ConvTranspose2d(1, 1, 4, stride=2, padding=1, bias=False)
        self.upscore8 = nn.ConvTranspose2d(1, 1, 16, stride=8, padding=4, bias=False)

    def forward(self, x):
        pools = []
        for stage in self.stages:
            x = stage(x)
            pools.append(x)
        pool3, pool4 = pools[2], pools[3]
        score = self.score_fr(self.fc7(self.fc6(x)))
        score = self.upscore2(score) + self.score_pool4(pool4)
        score = self.upscore_pool4(score) + self.score_pool3(pool3)
        return torch.sigmoid(self.upscore8(score))


# ---------------------------------------------------------------------------
# Handles and builders
# ---------------------------------------------------------------------------

NETWORKS = ("dsnet", "unet", "fcn8s")


@dataclass
class ModelHandle:
    network: nn.Module
    spec: NetworkSpec
    name: str = "dsnet"
    options: dict[str, Any] = field(default_factory=dict)
    tap_shapes: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.spec.input_height, self.spec.input_width, self.spec.input_channels)

    def builder_config(self) -> dict:
        return {"network": self.name, "spec": self.spec.to_dict(), "options": dict(self.options)}


def build_dsnet(spec: NetworkSpec | None = None, encoder_weights=None, seed: int = 0) -> ModelHandle:
    spec = (spec or NetworkSpec()).validate()
    g = torch.Generator().manual_seed(seed)
    net = DSNet(spec)
    he_normal_(net, g)
    if encoder_weights is not None:
        from .checkpoint import load_weights
        load_weights(net.encoder, encoder_weights)
    return ModelHandle(net, spec, "dsnet", {"seed": seed}, derive_tap_shapes(spec))


def _baseline_spec(spec: NetworkSpec | None, overrides: dict, factor: int = 32) -> NetworkSpec:
    spec = spec or NetworkSpec()
    dims = {k: overrides.pop(k) for k in ("input_height", "input_width", "input_channels")
            if k in overrides}
    spec = dataclasses.replace(spec, **dims)
    check_input_dims(spec.input_height, spec.input_width, factor)
    return spec


def build_unet(spec: NetworkSpec | None = None, seed: int = 0, **overrides) -> ModelHandle:
    spec = _baseline_spec(spec, overrides)
    options = {"base_width": 64, "up_kernel": 4, **overrides}
    g = torch.Generator().manual_seed(seed)
    net = UNet(spec.input_channels, base_width=options["base_width"],
               up_kernel=options["up_kernel"])
    he_normal_(net, g)
    return ModelHandle(net, spec, "unet", {"seed": seed, **options})


def build_fcn8s(spec: NetworkSpec | None = None, seed: int = 0, **overrides) -> ModelHandle:
    spec = _baseline_spec(spec, overrides)
    options = {"fc_width": 4096, **overrides}
    g = torch.Generator().manual_seed(seed)
    net = FCN8s(spec.input_channels, fc_width=options["fc_width"])
    he_normal_(net, g)
    return ModelHandle(net, spec, "fcn8s", {"seed": seed, **options})


def build_model(name: str, spec: NetworkSpec | None = None, seed: int = 0,
                encoder_weights=None, **options) -> ModelHandle:
    if name == "dsnet":
        return build_dsnet(spec, encoder_weights=encoder_weights, seed=seed)
    if encoder_weights is not None:
        raise ValueError(f"encoder weights are only supported for dsnet, not {name}")
    if name == "unet":
        return build_unet(spec, seed=seed, **options)
    if name == "fcn8s":
        return build_fcn8s(spec, seed=seed, **options)
    raise ValueError(f"unknown network {name!r}; choose from {', '.join(NETWORKS)}")


def build_from_config(config: dict) -> ModelHandle:
    options = dict(config.get("options", {}))
    seed = options.pop("seed", 0)
    return build_model(config["network"], NetworkSpec.from_dict(config["spec"]), seed=seed,
                       **options)


# ---------------------------------------------------------------------------
# Parameter accounting and summaries
# ---------------------------------------------------------------------------

@dataclass
class LayerCount:
    name: str
    kind: str
    params: int
    conv_weights: int
    formula: int | None


@dataclass
class ParameterCount:
    total: int
    trainable: int
    conv_weights: int
    layers: list[LayerCount]

    def __int__(self):
        return self.total


def _module_of(model) -> nn.Module:
    return model.network if isinstance(model, ModelHandle) else model


def _accountable_layers(module: nn.Module):
    """Yield (name, module) for layers counted as units: separable convs are one unit."""
    def walk(prefix, m):
        if isinstance(m, (SeparableConv2d, nn.Conv2d, nn.ConvTranspose2d, nn.BatchNorm2d)):
            yield prefix, m
            return
        for child_name, child in m.named_children():
            yield from walk(f"{prefix}.{child_name}" if prefix else child_name, child)
    yield from walk("", module)


def _layer_count(name: str, m: nn.Module) -> LayerCount:
    params = sum(p.numel() for p in m.parameters())
    if isinstance(m, SeparableConv2d):
        q = LayerCostQuery(m.out_channels, m.in_channels, m.kernel_size)
        weights = m.depthwise.weight.numel() + m.pointwise.weight.numel()
        return LayerCount(name, "separable_conv", params, weights, params_depthwise_separable(q))
    if isinstance(m, nn.ConvTranspose2d):
        k = m.kernel_size[0]
        q = LayerCostQuery(m.out_channels, m.in_channels, k)
        return LayerCount(name, "transposed_conv", params, m.weight.numel(),
                          params_standard_conv(q) if m.groups == 1 else None)
    if isinstance(m, nn.Conv2d):
        k = m.kernel_size[0]
        if m.groups == 1:
            formula = params_standard_conv(LayerCostQuery(m.out_channels, m.in_channels, k))
        else:
            formula = None
        return LayerCount(name, "conv", params, m.weight.numel(), formula)
    return LayerCount(name, "batch_norm", params, 0, None)


def count_parameters(model) -> ParameterCount:
    """Total and per-layer parameter counts.

    ``conv_weights`` is the bias-free conv-kernel subtotal comparable with the
    closed-form cost formulas; ``total`` also includes biases and batch-norm
    scale/shift.
    """
    module = _module_of(model)
    layers = [_layer_count(n, m) for n, m in _accountable_layers(module)]
    total = sum(p.numel() for p in module.parameters())
    trainable = sum(p.numel() for p in module.parameters() if p.requires_grad)
    return ParameterCount(total, trainable, sum(l.conv_weights for l in layers), layers)


@dataclass
class SummaryRow:
    name: str
    kind: str
    output_shape: tuple[int, ...]
    params: int
    kernel: int | None = None
    stride: int | None = None
    kernel_divisible: bool | None = None
    overlapping: bool | None = None

    @property
    def checkerboard_prone(self) -> bool | None:
        if self.kernel is None:
            return None
        return not self.kernel_divisible or self.overlapping


def summarize(handle: ModelHandle) -> list[SummaryRow]:
    """Per-layer output shapes (H, W, C) and parameter counts from one dummy pass."""
    module = handle.network
    layers = list(_accountable_layers(module))
    shapes: dict[str, tuple[int, ...]] = {}
    hooks = []
    for name, m in layers:
        def hook(_m, _inp, out, name=name):
            shapes[name] = (out.shape[2], out.shape[3], out.shape[1])
        hooks.append(m.register_forward_hook(hook))
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            h, w, c = handle.input_shape
            module(torch.zeros(1, c, h, w))
    finally:
        for hk in hooks:
            hk.remove()
        module.train(was_training)
    rows = []
    for name, m in layers:
        lc = _layer_count(name, m)
        row = SummaryRow(name, lc.kind, shapes.get(name, ()), lc.params)
        if isinstance(m, nn.ConvTranspose2d):
            k, s = m.kernel_size[0], m.stride[0]
            row.kernel, row.stride = k, s
            row.kernel_divisible = k % s == 0
            row.overlapping = k > s
        rows.append(row)
    return rows


def upsampling_report(handle: ModelHandle) -> list[SummaryRow]:
    return [r for r in summarize(handle) if r.kind == "transposed_conv"]


def format_summary(rows: Sequence[SummaryRow]) -> str:
    header = f"{'layer':<48} {'kind':<16} {'output (H,W,C)':<18} {'params':>12}  upsampling"
    lines = [header, "-" * len(header)]
    for r in rows:
        up = ""
        if r.kernel is not None:
            up = (f"k={r.kernel} s={r.stride} divisible={r.kernel_divisible} "
                  f"checkerboard_prone={r.checkerboard_prone}")
        shape = "x".join(str(s) for s in r.output_shape)
        lines.append(f"{r.name:<48} {r.kind:<16} {shape:<18} {r.params:>12,}  {up}")
    total = sum(r.params for r in rows)
    lines.append("-" * len(header))
    lines.append(f"{'total':<48} {'':<16} {'':<18} {total:>12,}")
    return "\n".join(lines)


def summary_json(rows: Sequence[SummaryRow]) -> str:
    out = []
    for r in rows:
        d = dataclasses.asdict(r)
        d["output_shape"] = list(r.output_shape)
        d["checkerboard_prone"] = r.checkerboard_prone
        out.append(d)
    return json.dumps(out, indent=1)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def forward(model: ModelHandle, images) -> np.ndarray:
    """Run inference on a channels-last batch; returns ``(B, H, W, 1)`` probabilities."""
    arr = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    expected = model.input_shape
    if arr.ndim != 4 or tuple(arr.shape[1:]) != expected:
        raise ShapeError(f"expected batch of shape (B, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}), got {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)
    net = model.network
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out = net(x)
    finally:
        net.train(was_training)
    return out.permute(0, 2, 3, 1).numpy()
