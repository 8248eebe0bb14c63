"""Parameter-initialising helpers and thin conv/linear wrappers."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


def add_conv(params: ParamStore, prefix: str, out_ch: int, in_ch: int, k: int, rng: np.random.Generator, zero: bool = False) -> None:
    if zero:
        w = np.zeros((out_ch, in_ch, k, k), dtype=np.float32)
    else:
        w = rng.normal(0.0, np.sqrt(2.0 / (in_ch * k * k)), size=(out_ch, in_ch, k, k)).astype(np.float32)
    params.add(f"{prefix}.w", w)
    params.add(f"{prefix}.b", np.zeros(out_ch, dtype=np.float32))


def conv(x: Tensor, params: ParamStore, prefix: str, stride: int = 1) -> Tensor:
    w = params[f"{prefix}.w"]
    return T.conv2d(x, w, params[f"{prefix}.b"], stride=stride, pad=w.shape[-1] // 2)


def add_linear(params: ParamStore, prefix: str, out_dim: int, in_dim: int, rng: np.random.Generator, zero: bool = False) -> None:
    if zero:
        w = np.zeros((out_dim, in_dim), dtype=np.float32)
    else:
        w = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim)).astype(np.float32)
    params.add(f"{prefix}.w", w)
    params.add(f"{prefix}.b", np.zeros(out_dim, dtype=np.float32))


def linear(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """Per-token affine map on channel-first tokens: [N, in, n] -> [N, out, n]."""
    w = params[f"{prefix}.w"]
    b = params[f"{prefix}.b"]
    y = T.matmul(w, x)
    return T.add(y, T.expand(T.reshape(b, (w.shape[0], 1)), y.shape))
