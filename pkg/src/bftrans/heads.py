"""Anchor-free state prediction: heads, box decoding, targets and the training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .boxes import BBox
from .fusion import FusedPair
from .layers import add_conv, conv
from .params import ParamStore
from .tensor import ContractError, DimensionError, Tensor

PROB_EPS = 1e-6
AREA_EPS = 1e-9


@dataclass(frozen=True)
class HeadsConfig:
    depth: int = 3
    window_gamma: float = 0.3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("heads.depth must be >= 1")
        if not 0.0 <= self.window_gamma <= 1.0:
            raise ValueError("heads.window_gamma must lie in [0, 1]")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 2.0
    lambda2: float = 5.0


class Prediction(NamedTuple):
    cls: Tensor  # [N, 1, h, w] logits
    offset: Tensor  # [N, 2, h, w] (x, y) center offsets, fraction of the search size
    size: Tensor  # [N, 2, h, w] (w, h) logits; sigmoid gives fraction of the search size


@dataclass
class TrainTarget:
    heatmap: np.ndarray  # [1, h, w]
    offset: np.ndarray  # [2]
    size: np.ndarray  # [2]
    row: int
    col: int

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros_like(self.heatmap)
        m[0, self.row, self.col] = 1.0
        return m

    @property
    def offset_map(self) -> np.ndarray:
        return self._fill(self.offset)

    @property
    def size_map(self) -> np.ndarray:
        return self._fill(self.size)

    def _fill(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros((2,) + self.heatmap.shape[1:], dtype=self.heatmap.dtype)
        out[:, self.row, self.col] = v
        return out


HEAD_OUTPUTS = {"cls": 1, "offset": 2, "size": 2}


def init_heads(params: ParamStore, d: int, cfg: HeadsConfig, rng: np.random.Generator) -> None:
    for head, out_ch in HEAD_OUTPUTS.items():
        for i in range(cfg.depth):
            add_conv(params, f"heads.{head}.conv{i}", d, d, 3, rng)
        add_conv(params, f"heads.{head}.out", out_ch, d, 1, rng, zero=True)


def _head(x: Tensor, params: ParamStore, head: str, depth: int) -> Tensor:
    for i in range(depth):
        x = T.relu(conv(x, params, f"heads.{head}.conv{i}"))
    return conv(x, params, f"heads.{head}.out")


def predict(f: FusedPair, params: ParamStore, cfg: HeadsConfig | None = None) -> Prediction:
    """Classification from the deep map, offset and size from the shallow map."""
    cfg = cfg or HeadsConfig()
    if f.m3.shape != f.m4.shape:
        raise DimensionError(f"head inputs differ in shape: {f.m3.shape} vs {f.m4.shape}")
    out = Prediction(
        cls=_head(f.m4, params, "cls", cfg.depth),
        offset=_head(f.m3, params, "offset", cfg.depth),
        size=_head(f.m3, params, "size", cfg.depth),
    )
    for name, t in zip(out._fields, out):
        T.check_finite(t, f"{name} head")
    return out


# ---------------------------------------------------------------- decoding


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cosine_window(h: int, w: int) -> np.ndarray:
    return np.outer(np.hanning(h + 2)[1:-1], np.hanning(w + 2)[1:-1])


def decode(
    cls: np.ndarray,
    offset: np.ndarray,
    size: np.ndarray,
    search_size: int,
    stride: int,
    window: np.ndarray | None = None,
    gamma: float = 0.3,
) -> tuple[BBox, float]:
    """Box (in search-crop pixels) and score at the best cell of one sample.

    Arrays are unbatched: cls [1, h, w], offset/size [2, h, w].  Ties go to the
    smallest row-major index.
    """
    h, w = cls.shape[-2:]
    if h * stride != search_size:
        raise DimensionError(f"grid {h} x stride {stride} != search size {search_size}")
    score = _sigmoid(cls.reshape(h, w).astype(np.float64))
    if window is not None:
        score = (1.0 - gamma) * score + gamma * window
    flat = int(np.argmax(score))
    i, j = divmod(flat, w)
    cx = ((j + 0.5) / w + float(offset[0, i, j])) * search_size
    cy = ((i + 0.5) / h + float(offset[1, i, j])) * search_size
    bw = float(_sigmoid(size[0, i, j])) * search_size
    bh = float(_sigmoid(size[1, i, j])) * search_size
    return BBox(cx - bw / 2, cy - bh / 2, bw, bh), float(score[i, j])


# ---------------------------------------------------------------- targets


def gaussian_radius(box_w: float, box_h: float, stride: int) -> int:
    return max(1, int(round(min(box_w, box_h) / (2 * stride))))


def build_target(box: BBox, grid: int, stride: int, search_size: int) -> TrainTarget:
    """Heatmap and regression targets for a box given in search-crop pixels."""
    cx, cy = box.center
    col = int(np.clip(np.floor(cx / stride), 0, grid - 1))
    row = int(np.clip(np.floor(cy / stride), 0, grid - 1))
    r = gaussian_radius(box.w, box.h, stride)
    sigma = (2 * r + 1) / 6.0
    ii, jj = np.mgrid[0:grid, 0:grid]
    d2 = (ii - row) ** 2 + (jj - col) ** 2
    heat = np.exp(-d2 / (2 * sigma * sigma))
    heat[(np.abs(ii - row) > r) | (np.abs(jj - col) > r)] = 0.0
    heat[row, col] = 1.0
    offset = np.array([cx / search_size - (col + 0.5) / grid, cy / search_size - (row + 0.5) / grid])
    size = np.array([box.w / search_size, box.h / search_size])
    return TrainTarget(heat[None].astype(np.float32), offset.astype(np.float32), size.astype(np.float32), row, col)


# ---------------------------------------------------------------- losses


def focal_loss(cls: Tensor, heatmap: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss on [N, 1, h, w] logits, averaged over positives."""
    heat = np.asarray(heatmap, dtype=cls.dtype)
    if heat.shape != cls.shape:
        raise DimensionError(f"heatmap {heat.shape} vs logits {cls.shape}")
    pos = heat == 1.0
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ContractError("focal loss needs at least one positive cell")
    p = T.clamp(T.sigmoid(cls), PROB_EPS, 1.0 - PROB_EPS)
    pos_w = T.Tensor(pos.astype(cls.dtype), dtype=cls.dtype)
    neg_w = T.Tensor(np.where(pos, 0.0, (1.0 - heat) ** 4).astype(cls.dtype), dtype=cls.dtype)
    one_minus = T.sub(1.0, p)
    pos_term = T.mul(T.mul(T.square(one_minus), T.log(p)), pos_w)
    neg_term = T.mul(T.mul(T.square(p), T.log(one_minus)), neg_w)
    return T.mul(T.sum_(T.add(pos_term, neg_term)), -1.0 / n_pos)


def _xyxy(boxes: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    n = boxes.shape[0]
    cols = [T.reshape(c, (n,)) for c in _columns(boxes)]
    x, y, w, h = cols
    return x, y, T.add(x, w), T.add(y, h)


def _columns(boxes: Tensor) -> list[Tensor]:
    rest = boxes
    out = []
    for _ in range(3):
        head, rest = T.split(rest, axis=1, at=1)
        out.append(head)
    out.append(rest)
    return out


def giou_loss(pred: Tensor, gt) -> Tensor:
    """Mean of ``1 - GIoU`` over [N, 4] boxes in (x, y, w, h) form."""
    if not isinstance(gt, Tensor):
        gt = T.Tensor(np.asarray(gt, dtype=pred.dtype).reshape(pred.shape), dtype=pred.dtype)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise DimensionError(f"giou_loss needs matching [N, 4] boxes, got {pred.shape} and {gt.shape}")
    ax1, ay1, ax2, ay2 = _xyxy(pred)
    bx1, by1, bx2, by2 = _xyxy(gt)
    iw = T.clamp(T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1)), 0.0)
    ih = T.clamp(T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1)), 0.0)
    inter = T.mul(iw, ih)
    area_a = T.clamp(T.mul(T.sub(ax2, ax1), T.sub(ay2, ay1)), AREA_EPS)
    area_b = T.clamp(T.mul(T.sub(bx2, bx1), T.sub(by2, by1)), AREA_EPS)
    union = T.clamp(T.sub(T.add(area_a, area_b), inter), AREA_EPS)
    cw = T.sub(T.maximum(ax2, bx2), T.minimum(ax1, bx1))
    ch = T.sub(T.maximum(ay2, by2), T.minimum(ay1, by1))
    enclose = T.clamp(T.mul(cw, ch), AREA_EPS)
    iou = T.div(inter, union)
    giou = T.sub(iou, T.div(T.sub(enclose, union), enclose))
    return T.mean(T.sub(1.0, giou))


class LossTerms(NamedTuple):
    total: Tensor
    focal: float
    l1: float
    giou: float


def combine(focal: Tensor, l1: Tensor, giou: Tensor, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return T.add(T.add(focal, T.mul(l1, cfg.lambda1)), T.mul(giou, cfg.lambda2))


def total_loss(pred: Prediction, targets: list[TrainTarget], cfg: LossConfig | None = None) -> LossTerms:
    """Focal + lambda1 * L1 + lambda2 * GIoU, regression taken at each positive cell."""
    n, _, h, w = pred.cls.shape
    if len(targets) != n:
        raise DimensionError(f"{len(targets)} targets for batch of {n}")
    dtype = pred.cls.dtype
    heat = np.stack([t.heatmap for t in targets]).astype(dtype)
    rows = np.array([t.row for t in targets])
    cols = np.array([t.col for t in targets])
    l_focal = focal_loss(pred.cls, heat)

    off = T.gather_cells(pred.offset, rows, cols)  # [N, 2]
    siz = T.sigmoid(T.gather_cells(pred.size, rows, cols))  # [N, 2]
    off_gt = np.stack([t.offset for t in targets]).astype(dtype)
    siz_gt = np.stack([t.size for t in targets]).astype(dtype)
    reg = T.concat([off, siz], axis=1)
    reg_gt = T.Tensor(np.concatenate([off_gt, siz_gt], axis=1), dtype=dtype)
    l_l1 = T.mean(T.abs_(T.sub(reg, reg_gt)))

    # boxes in search-size units: centre = cell centre + offset
    cell = T.Tensor(np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=1), dtype=dtype)
    centre = T.add(off, cell)
    pred_xywh = T.concat([T.sub(centre, T.mul(siz, 0.5)), siz], axis=1)
    gt_centre = off_gt + np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=1)
    gt_xywh = np.concatenate([gt_centre - siz_gt / 2, siz_gt], axis=1)
    l_giou = giou_loss(pred_xywh, gt_xywh)

    total = combine(l_focal, l_l1, l_giou, cfg)
    return LossTerms(total, l_focal.item(), l_l1.item(), l_giou.item())
