"""Weight initialisation."""
from __future__ import annotations

import math

import torch
import torch.nn as nn


def init_he_normal(shape, fan_in: int, seed: int | None = None,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Sample a "he normal" tensor.

    Values come from N(0, 2/fan_in) truncated at two standard deviations.
    Passing ``seed`` makes the draw reproducible; ``generator`` lets callers
    thread one RNG through a whole network.
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    out = torch.empty(tuple(shape), dtype=torch.float32)
    nn.init.trunc_normal_(out, mean=0.0, std=std, a=-2 * std, b=2 * std,
                          generator=generator)
    return out


def conv_fan_in(weight: torch.Tensor, transposed: bool = False, groups: int = 1) -> int:
    # Conv2d weight: (out, in/groups, kh, kw); ConvTranspose2d: (in, out/groups, kh, kw)
    receptive = weight.shape[2] * weight.shape[3]
    if transposed:
        return weight.shape[0] // groups * receptive
    return weight.shape[1] * receptive


def he_normal_(module: nn.Module, generator: torch.Generator) -> None:
    """Re-initialise every conv in ``module`` in place; reset batch-norm affine terms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            transposed = isinstance(m, nn.ConvTranspose2d)
            fan_in = conv_fan_in(m.weight, transposed, m.groups)
            with torch.no_grad():
                m.weight.copy_(init_he_normal(m.weight.shape, fan_in, generator=generator))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
