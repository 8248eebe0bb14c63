"""Dense float tensors with reverse-mode differentiation.

Every differentiable operation in the tracker is built from the small
vocabulary in this module.  A :class:`Tensor` remembers the tensors it was
computed from together with a closure mapping the output gradient to input
gradients; :func:`backward` walks that graph in reverse topological order.

Shapes are explicit.  Elementwise binary operations require equal shapes; the
only implicit broadcast allowed is a single-element tensor (or Python number)
against a full tensor.  Everything else goes through :func:`expand`.

Most spatial operations accept either an unbatched ``[C, H, W]`` tensor or a
batched ``[N, C, H, W]`` one.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ContractError",
    "DimensionError",
    "NonFiniteError",
    "Graph",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "channel_pool",
    "check_finite",
    "clamp",
    "concat",
    "conv2d",
    "default_dtype",
    "div",
    "exp",
    "expand",
    "gather_cells",
    "global_pool",
    "log",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "mul",
    "precision",
    "relu",
    "record_branches",
    "reshape",
    "sigmoid",
    "softmax",
    "split",
    "square",
    "sub",
    "sum_",
    "transpose",
    "xcorr_depthwise",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in a module output."""


_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch pattern of every non-smooth op evaluated inside the block.

    ReLU masks, max/min selections, clamp activity and abs signs are appended
    in evaluation order.  Finite differences are only meaningful between two
    evaluations whose patterns match.
    """
    prev = getattr(_local, "branches", None)
    log: list[np.ndarray] = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = prev


def _branch(pattern: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(np.packbits(pattern))


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], fn: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = fn if out.requires_grad else None
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _scalar_like(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape or _scalar_like(a) or _scalar_like(b):
        return
    raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (use expand to broadcast)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def _bin_data(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    ad, bd = a.data, b.data
    if _scalar_like(a) and a.shape != b.shape:
        ad = ad.reshape(())
    if _scalar_like(b) and a.shape != b.shape:
        bd = bd.reshape(())
    return ad, bd


# ---------------------------------------------------------------- graph


class Graph:
    """Nodes reachable from an output, listed so every input precedes its user."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None, params=None) -> None:
    """Populate gradients of ``loss`` with respect to every leaf that requires them.

    When ``params`` (a ParamStore) is given, each of its entries receives a
    gradient; entries the loss does not depend on get exact zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                leaves[id(node)] = node
                grads[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for t in params.tensors():
            t.grad = np.zeros_like(t.data)
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        bad = np.argwhere(~np.isfinite(t.data))[0]
        raise NonFiniteError(f"non-finite value in {where} at index {tuple(int(i) for i in bad)}")
    return t


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    ad, bd = _bin_data(a, b)
    out = ad + bd
    return Tensor._result(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "sub")
    ad, bd = _bin_data(a, b)
    return Tensor._result(ad - bd, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    ad, bd = _bin_data(a, b)
    return Tensor._result(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "div")
    ad, bd = _bin_data(a, b)
    out = ad / bd
    return Tensor._result(
        out, (a, b), lambda g: (_reduce_to(g / bd, a), _reduce_to(-g * out / bd, b)), "div"
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _binary_shapes(a, b, "maximum")
    ad, bd = _bin_data(a, b)
    pick_a = ad >= bd
    _branch(pick_a)
    out = np.where(pick_a, ad, bd)
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_reduce_to(np.where(pick_a, g, 0), a), _reduce_to(np.where(pick_a, 0, g), b)),
        "maximum",
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    _binary_shapes(a, b, "minimum")
    ad, bd = _bin_data(a, b)
    pick_a = ad <= bd
    _branch(pick_a)
    out = np.where(pick_a, ad, bd)
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_reduce_to(np.where(pick_a, g, 0), a), _reduce_to(np.where(pick_a, 0, g), b)),
        "minimum",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _branch(mask)
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._result(np.log(d), (x,), lambda g: (g / d,), "log")


def square(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._result(d * d, (x,), lambda g: (2.0 * g * d,), "square")


def abs_(x: Tensor) -> Tensor:
    d = x.data
    _branch(d >= 0)
    return Tensor._result(np.abs(d), (x,), lambda g: (g * np.sign(d),), "abs")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping was active."""
    d = x.data
    out = np.clip(d, lo, hi)
    inside = np.ones(d.shape, dtype=bool)
    if lo is not None:
        inside &= d >= lo
    if hi is not None:
        inside &= d <= hi
    _branch(inside)
    return Tensor._result(out, (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    raw = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    shape = x.shape

    def fn(g):
        g = g.reshape(raw.shape)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(raw.reshape(1) if raw.ndim == 0 else raw, (x,), fn, "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), fn, "softmax")


def _max_backward(d: np.ndarray, axis: int) -> np.ndarray:
    # one-hot mask of the first maximum along `axis`
    idx = np.expand_dims(d.argmax(axis=axis), axis)
    mask = np.zeros(d.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=axis)
    _branch(mask)
    return mask


def global_pool(x: Tensor, mode: str) -> Tensor:
    """Pool over the two trailing spatial axes, keeping them as size 1."""
    if x.ndim < 3:
        raise DimensionError(f"global_pool needs [.., C, H, W], got {x.shape}")
    shape = x.shape
    flat = x.data.reshape(shape[:-2] + (-1,))
    if mode == "avg":
        out = flat.mean(axis=-1).reshape(shape[:-2] + (1, 1))
        n = flat.shape[-1]

        def fn(g):
            return (np.broadcast_to(g / n, shape).copy(),)

    elif mode == "max":
        out = flat.max(axis=-1).reshape(shape[:-2] + (1, 1))
        mask = _max_backward(flat, -1).reshape(shape)

        def fn(g):
            return (np.where(mask, g, 0).astype(g.dtype),)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return Tensor._result(out, (x,), fn, f"global_pool_{mode}")


def channel_pool(x: Tensor, mode: str) -> Tensor:
    """Pool over the channel axis (third from the end), keeping it as size 1."""
    if x.ndim < 3:
        raise DimensionError(f"channel_pool needs [.., C, H, W], got {x.shape}")
    d = x.data
    if mode == "avg":
        out = d.mean(axis=-3, keepdims=True)
        c = d.shape[-3]

        def fn(g):
            return (np.broadcast_to(g / c, d.shape).copy(),)

    elif mode == "max":
        out = d.max(axis=-3, keepdims=True)
        mask = _max_backward(d, -3)

        def fn(g):
            return (np.where(mask, g, 0).astype(g.dtype),)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return Tensor._result(out, (x,), fn, f"channel_pool_{mode}")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return Tensor._result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes (numpy rules) to ``shape``."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot expand {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def fn(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, (s, t) in enumerate(zip(src, g.shape)) if s == 1 and t != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor._result(out, (x,), fn, "expand")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat axis {axis} invalid for rank {ndim}")
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != u for i, (s, u) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(out, tuple(tensors), fn, "concat")


def split(x: Tensor, axis: int, at: int) -> tuple[Tensor, Tensor]:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"split axis {axis} invalid for shape {x.shape}")
    ax = axis % x.ndim
    n = x.shape[ax]
    if not 0 < at < n:
        raise DimensionError(f"split point {at} outside (0, {n})")
    first, second = np.split(x.data, [at], axis=ax)
    shape = x.shape

    def part(lo, hi, data, name):
        def fn(g):
            full = np.zeros(shape, dtype=g.dtype)
            idx = [slice(None)] * len(shape)
            idx[ax] = slice(lo, hi)
            full[tuple(idx)] = g
            return (full,)

        return Tensor._result(np.ascontiguousarray(data), (x,), fn, name)

    return part(0, at, first, "split_head"), part(at, n, second, "split_tail")


def gather_cells(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick ``x[n, :, rows[n], cols[n]]`` for each batch item: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise DimensionError(f"gather_cells needs [N, C, H, W], got {x.shape}")
    n = np.arange(x.shape[0])
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = x.data[n, :, rows, cols]
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[n, :, rows, cols] = g
        return (full,)

    return Tensor._result(out, (x,), fn, "gather_cells")


# ---------------------------------------------------------------- linear algebra


def _sum_leading(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    A 2-D operand is shared across the other operand's leading batch axes;
    otherwise both operands must carry identical batch axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def fn(g):
        ga = _sum_leading(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _sum_leading(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._result(out, (a, b), fn, "matmul")


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected [C, H, W] or [N, C, H, W], got {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation style 2-D convolution (no kernel flip) with zero padding."""
    xd, squeeze = _batched(x)
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be [O, C, kh, kw], got {w.shape}")
    n, c, h, wd = xd.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent {ho}x{wo} is not positive")
    if b is not None and b.shape != (o,):
        raise DimensionError(f"conv2d bias must be [{o}], got {b.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w2 = w.data.reshape(o, -1)
    out = cols @ w2.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def fn(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += gcols[
                        :, :, :, :, u, v
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            gx = gx[0] if squeeze else gx
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._result(out, parents, fn, "conv2d")


def xcorr_depthwise(z: Tensor, x: Tensor) -> Tensor:
    """Slide each template channel over the matching search channel.

    ``z`` is ``[N, C, kh, kw]`` and ``x`` is ``[N, C, H, W]`` (or both
    unbatched).  The search map is zero padded so the response keeps the
    ``H x W`` extent; response cell ``(i, j)`` scores the window whose top-left
    corner sits at ``(i - (kh - 1) // 2, j - (kw - 1) // 2)``.
    """
    zd, zs = _batched(z)
    xd, xs = _batched(x)
    if zs != xs:
        raise DimensionError("xcorr_depthwise: template and search must both be batched or both not")
    n, c, kh, kw = zd.shape
    nx, cx, h, w = xd.shape
    if n != nx:
        raise DimensionError(f"xcorr_depthwise batch mismatch: {n} vs {nx}")
    if c != cx:
        raise DimensionError(f"xcorr_depthwise channel mismatch: {c} vs {cx}")
    if kh > h or kw > w:
        raise DimensionError(f"template {kh}x{kw} larger than search {h}x{w}")
    top, left = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (top, kh - 1 - top), (left, kw - 1 - left)))
    out = np.zeros((n, c, h, w), dtype=np.result_type(zd, xd))
    for u in range(kh):
        for v in range(kw):
            out += xp[:, :, u : u + h, v : v + w] * zd[:, :, u, v, None, None]

    def fn(g):
        g4 = g[None] if xs else g
        gz = np.empty(zd.shape, dtype=g.dtype)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                gz[:, :, u, v] = (g4 * xp[:, :, u : u + h, v : v + w]).sum(axis=(2, 3))
                gxp[:, :, u : u + h, v : v + w] += g4 * zd[:, :, u, v, None, None]
        gx = gxp[:, :, top : top + h, left : left + w]
        if xs:
            return gz[0], gx[0]
        return gz, gx

    return Tensor._result(out[0] if xs else out, (z, x), fn, "xcorr_depthwise")


def stack_leaves(arrays: Iterable[np.ndarray]) -> Tensor:
    """Stack plain arrays into a constant batched tensor."""
    return Tensor(np.stack(list(arrays)))
