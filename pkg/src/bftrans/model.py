"""Assembling the tracker network and the ablation variants."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneConfig, FeaturePair, correlate, extract, init_backbone, init_correlation
from .fusion import FusedPair, FusionConfig, fuse, init_fusion
from .heads import HeadsConfig, LossConfig, LossTerms, Prediction, TrainTarget, init_heads, predict, total_loss
from .params import ParamStore
from .tape import TapeConfig
from .tensor import Tensor

VARIANTS = ("baseline", "ffm", "bfm", "bidir", "full")

# variant -> (fusion streams run, TAPE on)
_WIRING = {
    "baseline": ((), False),
    "ffm": (("fwd",), False),
    "bfm": (("bwd",), False),
    "bidir": (("fwd", "bwd"), False),
    "full": (("fwd", "bwd"), True),
}


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    tape: TapeConfig = field(default_factory=TapeConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)

    @property
    def streams(self) -> tuple[str, ...]:
        return _WIRING[self.variant][0]

    @property
    def active_tape(self) -> TapeConfig | None:
        on = _WIRING[self.variant][1] and self.tape.enabled
        return self.tape if on else None

    @property
    def stride(self) -> int:
        return self.backbone.total_stride

    @property
    def grid(self) -> int:
        return self.backbone.search_grid


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Fresh parameters.  Every variant shares the same parameter layout."""
    rng = np.random.default_rng(seed)
    params = ParamStore()
    init_backbone(params, cfg.backbone, rng)
    init_correlation(params, cfg.backbone, rng)
    init_fusion(params, cfg.backbone.d, cfg.fusion, cfg.tape, rng)
    init_heads(params, cfg.backbone.d, cfg.heads, rng)
    return params


def template_features(params: ParamStore, cfg: ModelConfig, z: Tensor) -> FeaturePair:
    return extract(z, cfg.backbone, params)


def fused_maps(params: ParamStore, cfg: ModelConfig, zf: FeaturePair, x: Tensor) -> FusedPair:
    xf = extract(x, cfg.backbone, params)
    m3, m4 = correlate(zf, xf, params, cfg.backbone.corr_mode)
    if cfg.variant == "baseline":
        return FusedPair(m3=m4, m4=m4)
    return fuse(m3, m4, params, cfg.fusion, cfg.active_tape, streams=cfg.streams)


def forward(params: ParamStore, cfg: ModelConfig, zf: FeaturePair, x: Tensor) -> Prediction:
    return predict(fused_maps(params, cfg, zf, x), params, cfg.heads)


def batch_loss(
    params: ParamStore, cfg: ModelConfig, z: Tensor, x: Tensor, targets: list[TrainTarget]
) -> LossTerms:
    pred = forward(params, cfg, template_features(params, cfg, z), x)
    return total_loss(pred, targets, cfg.loss)


def is_backbone(name: str) -> bool:
    return name.startswith("backbone.")


def decays(name: str) -> bool:
    """Weight decay applies to weights only: never biases or TAPE's alpha."""
    return name.endswith(".w")
