"""Spatial resampling shared by the sampler, training endpoints, and
distillation re-noising.

Downsampling is exact area (box) averaging, which is linear and composes:
averaging by 4 equals averaging by 2 twice. Upsampling defaults to bilinear to
match the sampler's stage transitions; nearest is available behind the config
flag.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

UPSAMPLE_MODES = ("nearest", "bilinear")


def upsample(x: torch.Tensor, size: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Resize ``x`` (B, C, H, W) up to ``size``."""
    if mode not in UPSAMPLE_MODES:
        raise ValueError(f"upsample mode must be one of {UPSAMPLE_MODES}, got {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def downsample_area(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average ``x`` (B, C, H, W) down to ``size``.

    The source sides must be integer multiples of the target sides so each
    output pixel is the exact mean of a source box.
    """
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return x
    if h % th != 0 or w % tw != 0:
        raise ValueError(f"target {size} must evenly divide source {(h, w)}")
    return F.adaptive_avg_pool2d(x, size)
