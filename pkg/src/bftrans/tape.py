"""Target-aware positional encoding.

A channel weight map (pooled descriptors through a two-layer MLP) and a
spatial weight map (channel-pooled planes through a conv) are multiplied into
a ``[d, h, w]`` modulation and added back onto the features, scaled by a
learnable ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import add_conv, add_linear, conv, linear
from .params import ParamStore
from .tensor import Tensor

KINDS = ("target", "sinusoidal")


@dataclass(frozen=True)
class TapeConfig:
    enabled: bool = True
    ratio: int = 4
    kernel: int = 7
    multiplicative: bool = False
    alpha_init: float = 0.0
    kind: str = "target"
    self_attention: bool = False

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("tape.kernel must be odd")
        if self.ratio < 1:
            raise ValueError("tape.ratio must be >= 1")
        if self.kind not in KINDS:
            raise ValueError(f"tape.kind must be one of {KINDS}")


def init_tape(params: ParamStore, prefix: str, d: int, cfg: TapeConfig, rng: np.random.Generator) -> None:
    hidden = d // cfg.ratio
    if hidden < 1:
        raise ValueError(f"tape hidden width d/ratio = {d}/{cfg.ratio} < 1")
    add_linear(params, f"{prefix}.mlp1", hidden, d, rng)
    add_linear(params, f"{prefix}.mlp2", d, hidden, rng)
    add_conv(params, f"{prefix}.conv", 1, 2, cfg.kernel, rng)
    params.add(f"{prefix}.alpha", np.array([cfg.alpha_init], dtype=np.float32))


def _batched(f: Tensor) -> tuple[Tensor, bool]:
    if f.ndim == 3:
        return T.reshape(f, (1,) + f.shape), True
    return f, False


def channel_weights(f: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """``sigmoid(MLP(maxpool_hw(F) + avgpool_hw(F)))`` shaped [N, d, 1, 1]."""
    fb, squeeze = _batched(f)
    n, d = fb.shape[:2]
    pooled = T.add(T.global_pool(fb, "max"), T.global_pool(fb, "avg"))
    h = T.relu(linear(T.reshape(pooled, (n, d, 1)), params, f"{prefix}.mlp1"))
    wc = T.reshape(T.sigmoid(linear(h, params, f"{prefix}.mlp2")), (n, d, 1, 1))
    return T.reshape(wc, (d, 1, 1)) if squeeze else wc


def spatial_weights(f: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """``sigmoid(Conv([maxpool_c(F); avgpool_c(F)]))`` shaped [N, 1, h, w]."""
    fb, squeeze = _batched(f)
    planes = T.concat([T.channel_pool(fb, "max"), T.channel_pool(fb, "avg")], axis=1)
    ws = T.sigmoid(conv(planes, params, f"{prefix}.conv"))
    return T.reshape(ws, ws.shape[1:]) if squeeze else ws


def sinusoidal_map(d: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sine/cosine table, half the channels for rows and half for columns."""
    pe = np.zeros((d, h, w), dtype=np.float64)
    half = max(d // 2, 1)
    for c in range(d):
        axis_pos = np.arange(h)[:, None] if c < half else np.arange(w)[None, :]
        j = c if c < half else c - half
        freq = 1.0 / (10000.0 ** (2 * (j // 2) / half))
        val = np.sin(axis_pos * freq) if j % 2 == 0 else np.cos(axis_pos * freq)
        pe[c] = np.broadcast_to(val, (h, w))
    return pe.astype(dtype)


def encode(f: Tensor, params: ParamStore, prefix: str, cfg: TapeConfig | None = None) -> Tensor:
    """``F + alpha * (W_c * W_s)`` with the two weight maps broadcast to F's shape."""
    cfg = cfg or TapeConfig()
    fb, squeeze = _batched(f)
    alpha = params[f"{prefix}.alpha"]
    if cfg.kind == "sinusoidal":
        pe = T.Tensor(np.broadcast_to(sinusoidal_map(*fb.shape[1:], dtype=fb.dtype), fb.shape), dtype=fb.dtype)
        out = T.add(fb, T.mul(pe, alpha))
    else:
        wc = T.expand(channel_weights(fb, params, prefix), fb.shape)
        ws = T.expand(spatial_weights(fb, params, prefix), fb.shape)
        mod = T.mul(wc, ws)
        if cfg.multiplicative:
            mod = T.mul(mod, fb)
        out = T.add(fb, T.mul(mod, alpha))
    return T.reshape(out, f.shape) if squeeze else out
