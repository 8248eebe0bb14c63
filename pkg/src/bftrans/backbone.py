"""Stand-in feature extractor and the per-stage template/search correlation.

The extractor is a plain four-stage CNN.  Stage 3 gets an extra 3x3 stride-2
conv and stage 4 a 1x1 stride-1 conv so both emit maps of the same spatial
size, and each is projected to ``d`` channels by a 1x1 conv.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .layers import add_conv, conv
from .params import ParamStore
from .tensor import DimensionError, Tensor

CORR_MODES = ("depthwise", "pixel")


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 32
    stage_channels: tuple[int, ...] = (8, 16, 24, 32)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    template_size: int = 40
    search_size: int = 72
    corr_mode: str = "depthwise"

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("d must be positive")
        if len(self.stage_channels) != 4 or len(self.strides) != 4:
            raise ValueError("backbone needs exactly four stages")
        if self.strides[3] != 2:
            # stage 4 must land where stage 3's extra stride-2 conv lands
            raise ValueError("stage-4 stride must be 2 to align with stage 3")
        if self.corr_mode not in CORR_MODES:
            raise ValueError(f"corr_mode must be one of {CORR_MODES}")
        for size in (self.template_size, self.search_size):
            if size % self.total_stride:
                raise ValueError(f"crop size {size} is not a multiple of total stride {self.total_stride}")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def template_grid(self) -> int:
        return self.template_size // self.total_stride

    @property
    def search_grid(self) -> int:
        return self.search_size // self.total_stride

    @classmethod
    def large(cls) -> "BackboneConfig":
        return cls(d=192, stage_channels=(32, 64, 96, 128), strides=(2, 2, 2, 2), template_size=128, search_size=256)


class FeaturePair(NamedTuple):
    f3: Tensor
    f4: Tensor


def init_backbone(params: ParamStore, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    in_ch = 3
    for k, ch in enumerate(cfg.stage_channels, start=1):
        add_conv(params, f"backbone.stage{k}.conv1", ch, in_ch, 3, rng)
        add_conv(params, f"backbone.stage{k}.conv2", ch, ch, 3, rng)
        in_ch = ch
    c3, c4 = cfg.stage_channels[2], cfg.stage_channels[3]
    add_conv(params, "backbone.align3", c3, c3, 3, rng)
    add_conv(params, "backbone.align4", c4, c4, 1, rng)
    add_conv(params, "backbone.proj3", cfg.d, c3, 1, rng)
    add_conv(params, "backbone.proj4", cfg.d, c4, 1, rng)


def init_correlation(params: ParamStore, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    in_ch = cfg.d if cfg.corr_mode == "depthwise" else cfg.template_grid**2
    for k in (3, 4):
        add_conv(params, f"corr.c{k}", cfg.d, in_ch, 1, rng)


def extract(image: Tensor, cfg: BackboneConfig, params: ParamStore) -> FeaturePair:
    """Stage-3 and stage-4 feature maps of a [N, 3, H, W] (or [3, H, W]) image in [0, 1]."""
    h, w = image.shape[-2:]
    if h < cfg.total_stride or w < cfg.total_stride:
        raise DimensionError(f"image {h}x{w} smaller than total stride {cfg.total_stride}")
    x = image
    stage_out = []
    for k, s in enumerate(cfg.strides, start=1):
        x = T.relu(conv(x, params, f"backbone.stage{k}.conv1", stride=s))
        x = T.relu(conv(x, params, f"backbone.stage{k}.conv2"))
        stage_out.append(x)
    s3 = T.relu(conv(stage_out[2], params, "backbone.align3", stride=2))
    s4 = T.relu(conv(stage_out[3], params, "backbone.align4"))
    f3 = T.check_finite(conv(s3, params, "backbone.proj3"), "backbone stage 3")
    f4 = T.check_finite(conv(s4, params, "backbone.proj4"), "backbone stage 4")
    if f3.shape != f4.shape:
        raise DimensionError(f"stage maps misaligned: {f3.shape} vs {f4.shape}")
    return FeaturePair(f3, f4)


def xcorr_pixel(z: Tensor, x: Tensor) -> Tensor:
    """Every template position's feature vector as a 1x1 kernel.

    [N, C, hz, wz] x [N, C, H, W] -> [N, hz*wz, H, W].
    """
    if z.ndim != 4 or x.ndim != 4 or z.shape[:2] != x.shape[:2]:
        raise DimensionError(f"xcorr_pixel: incompatible {z.shape} and {x.shape}")
    n, c, hz, wz = z.shape
    h, w = x.shape[-2:]
    zt = T.transpose(T.reshape(z, (n, c, hz * wz)), (0, 2, 1))
    out = T.matmul(zt, T.reshape(x, (n, c, h * w)))
    return T.reshape(out, (n, hz * wz, h, w))


def correlate(z: FeaturePair, x: FeaturePair, params: ParamStore, mode: str = "depthwise") -> tuple[Tensor, Tensor]:
    maps = []
    for k, zf, xf in ((3, z.f3, x.f3), (4, z.f4, x.f4)):
        if zf.shape[-3] != xf.shape[-3]:
            raise DimensionError(f"stage {k} channel mismatch: {zf.shape[-3]} vs {xf.shape[-3]}")
        if zf.shape[-2] > xf.shape[-2] or zf.shape[-1] > xf.shape[-1]:
            raise DimensionError(f"stage {k} template {zf.shape} larger than search {xf.shape}")
        if mode == "depthwise":
            r = T.xcorr_depthwise(zf, xf)
        elif mode == "pixel":
            r = xcorr_pixel(zf, xf)
        else:
            raise ValueError(f"unknown correlation mode {mode!r}")
        maps.append(T.check_finite(conv(r, params, f"corr.c{k}"), f"correlation stage {k}"))
    return maps[0], maps[1]
