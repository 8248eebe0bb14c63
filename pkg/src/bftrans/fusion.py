"""Bidirectional fusion transformer over the two correlation maps.

Each stream fine-tunes both maps with 1x1 convs, joins them along the token
axis, runs separable self-attention, splits them again and finishes with one
cross-attention block.  The forward stream lets shallow tokens steer the deep
values (producing the map used for classification); the backward stream does
the reverse (producing the map used for regression).

Separable attention, for tokens ``X`` of shape ``[d, n]``::

    s = Wq X + bq                  # one score per token, [1, n]
    c = softmax(s over tokens)
    k = sum_n c_n (Wk X + bk)_n    # shared context vector, [d, 1]
    y = Wo (relu(Wv V + bv) * k) + bo

In a cross block the scores and context come from the query source while the
gated values come from the value source.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .layers import add_linear, linear
from .params import ParamStore
from .tape import TapeConfig, encode, init_tape
from .tensor import DimensionError, Tensor

STREAMS = ("fwd", "bwd")


@dataclass(frozen=True)
class FusionConfig:
    depth: int = 1
    ffn_expansion: int = 2
    share_streams: bool = False
    share_self: bool = False

    def __post_init__(self):
        if self.depth < 1 or self.ffn_expansion < 1:
            raise ValueError("fusion.depth and fusion.ffn_expansion must be >= 1")


class FusedPair(NamedTuple):
    m3: Tensor
    m4: Tensor


def _stream_prefix(stream: str, part: str, cfg: FusionConfig) -> str:
    if stream == "bwd" and (cfg.share_streams or (cfg.share_self and part.startswith("self"))):
        stream = "fwd"
    return f"fusion.{stream}.{part}"


def init_attention(params: ParamStore, prefix: str, d: int, expansion: int, rng: np.random.Generator) -> None:
    add_linear(params, f"{prefix}.q", 1, d, rng)
    add_linear(params, f"{prefix}.k", d, d, rng)
    add_linear(params, f"{prefix}.v", d, d, rng)
    add_linear(params, f"{prefix}.o", d, d, rng, zero=True)
    add_linear(params, f"{prefix}.ffn1", expansion * d, d, rng)
    add_linear(params, f"{prefix}.ffn2", d, expansion * d, rng, zero=True)


def init_fusion(params: ParamStore, d: int, cfg: FusionConfig, tape_cfg: TapeConfig, rng: np.random.Generator) -> None:
    done: set[str] = set()
    for stream in STREAMS:
        parts = ["tune3", "tune4"] + [f"self{i}" for i in range(cfg.depth)]
        for part in parts:
            prefix = _stream_prefix(stream, part, cfg)
            if prefix in done:
                continue
            done.add(prefix)
            if part.startswith("tune"):
                add_linear(params, prefix, d, d, rng)
            else:
                init_attention(params, prefix, d, cfg.ffn_expansion, rng)
                init_tape(params, f"{prefix}.tape", d, tape_cfg, rng)
        for i in range(cfg.depth):
            prefix = f"fusion.{stream}.cross{i}"
            init_attention(params, prefix, d, cfg.ffn_expansion, rng)
            init_tape(params, f"{prefix}.tape", d, tape_cfg, rng)


def _context(q_src: Tensor, k_src: Tensor, params: ParamStore, prefix: str) -> tuple[Tensor, Tensor]:
    n, d, tokens = q_src.shape
    scores = linear(q_src, params, f"{prefix}.q")  # [N, 1, n]
    weights = T.softmax(scores, axis=-1)
    keys = linear(k_src, params, f"{prefix}.k")  # [N, d, n]
    ctx = T.sum_(T.mul(keys, T.expand(weights, keys.shape)), axis=-1, keepdims=True)  # [N, d, 1]
    return ctx, weights


def _attend(
    q_src: Tensor, k_src: Tensor, v_src: Tensor, params: ParamStore, prefix: str
) -> tuple[Tensor, Tensor]:
    """Separable attention block with both residual branches."""
    ctx, weights = _context(q_src, k_src, params, prefix)
    vals = T.relu(linear(v_src, params, f"{prefix}.v"))
    attn = linear(T.mul(vals, T.expand(ctx, vals.shape)), params, f"{prefix}.o")
    y = T.add(v_src, attn)
    hidden = T.relu(linear(y, params, f"{prefix}.ffn1"))
    out = T.add(y, linear(hidden, params, f"{prefix}.ffn2"))
    return out, weights


def _tokens(m: Tensor) -> Tensor:
    n, d, h, w = m.shape
    return T.reshape(m, (n, d, h * w))


def _keys(q_map: Tensor, params: ParamStore, prefix: str, tape_cfg: TapeConfig | None) -> Tensor:
    if tape_cfg is None or not tape_cfg.enabled:
        return q_map
    return encode(q_map, params, f"{prefix}.tape", tape_cfg)


def linear_self_attention(
    mc: Tensor,
    params: ParamStore,
    prefix: str,
    tape_cfg: TapeConfig | None = None,
    return_weights: bool = False,
):
    """Self-attention over joint tokens [N, d, 2*h*w] laid out as [N, d, 2h, w] maps.

    ``mc`` may be given as tokens [N, d, n] (no TAPE possible) or as a map
    [N, d, H, W].  TAPE on the keys is applied only when ``tape_cfg`` asks for
    it via ``self_attention``.
    """
    if mc.shape[-1] == 0 or (mc.ndim == 4 and mc.shape[-2] == 0):
        raise DimensionError("self-attention needs at least one token")
    if mc.ndim == 4:
        use_tape = tape_cfg is not None and tape_cfg.enabled and tape_cfg.self_attention
        key_map = _keys(mc, params, prefix, tape_cfg) if use_tape else mc
        toks, keys = _tokens(mc), _tokens(key_map)
    else:
        toks = keys = mc
    out, weights = _attend(toks, keys, toks, params, prefix)
    if mc.ndim == 4:
        out = T.reshape(out, mc.shape)
    return (out, weights) if return_weights else out


def linear_cross_attention(
    q_src: Tensor,
    v_src: Tensor,
    params: ParamStore,
    prefix: str,
    tape_cfg: TapeConfig | None = None,
    return_weights: bool = False,
):
    """Cross-attention on [N, d, h, w] maps: ``q_src`` scores and keys, ``v_src`` values."""
    if q_src.shape != v_src.shape:
        raise DimensionError(f"cross-attention token mismatch: {q_src.shape} vs {v_src.shape}")
    key_map = _keys(q_src, params, prefix, tape_cfg)
    out, weights = _attend(_tokens(q_src), _tokens(key_map), _tokens(v_src), params, prefix)
    out = T.reshape(out, v_src.shape)
    return (out, weights) if return_weights else out


def _tune(m: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return T.reshape(linear(_tokens(m), params, prefix), m.shape)


def run_stream(
    stream: str, m3: Tensor, m4: Tensor, params: ParamStore, cfg: FusionConfig, tape_cfg: TapeConfig | None
) -> Tensor:
    """One fusion stream; returns the adjusted deep map (fwd) or shallow map (bwd)."""
    a3 = _tune(m3, params, _stream_prefix(stream, "tune3", cfg))
    a4 = _tune(m4, params, _stream_prefix(stream, "tune4", cfg))
    h = a3.shape[-2]
    joint = T.concat([a3, a4], axis=-2)  # token-axis join: [N, d, 2h, w]
    for i in range(cfg.depth):
        joint = linear_self_attention(joint, params, _stream_prefix(stream, f"self{i}", cfg), tape_cfg)
    s3, s4 = T.split(joint, axis=-2, at=h)
    q, v = (s3, s4) if stream == "fwd" else (s4, s3)
    for i in range(cfg.depth):
        v = linear_cross_attention(q, v, params, f"fusion.{stream}.cross{i}", tape_cfg)
    return v


def fuse(
    m3: Tensor,
    m4: Tensor,
    params: ParamStore,
    cfg: FusionConfig | None = None,
    tape_cfg: TapeConfig | None = None,
    streams: tuple[str, ...] = STREAMS,
) -> FusedPair:
    """Run the requested streams; a map whose stream is skipped passes through unchanged."""
    cfg = cfg or FusionConfig()
    if m3.shape != m4.shape:
        raise DimensionError(f"fuse needs equal shapes, got {m3.shape} and {m4.shape}")
    squeeze = m3.ndim == 3
    if squeeze:
        m3, m4 = T.reshape(m3, (1,) + m3.shape), T.reshape(m4, (1,) + m4.shape)
    deep = run_stream("fwd", m3, m4, params, cfg, tape_cfg) if "fwd" in streams else m4
    shallow = run_stream("bwd", m3, m4, params, cfg, tape_cfg) if "bwd" in streams else m3
    T.check_finite(deep, "fusion deep map")
    T.check_finite(shallow, "fusion shallow map")
    if squeeze:
        deep, shallow = T.reshape(deep, deep.shape[1:]), T.reshape(shallow, shallow.shape[1:])
    return FusedPair(m3=shallow, m4=deep)
