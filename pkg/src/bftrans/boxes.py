"""Axis-aligned boxes in (x, y, w, h) pixel form and plain-array overlap helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2, cy - h / 2, w, h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def clamp_to(self, width: int, height: int, min_size: float = 1.0) -> "BBox":
        """Shrink/move so the box keeps at least ``min_size`` px inside the frame."""
        w = float(np.clip(self.w, min_size, width))
        h = float(np.clip(self.h, min_size, height))
        cx, cy = self.center
        cx = float(np.clip(cx, 0.0, width))
        cy = float(np.clip(cy, 0.0, height))
        return BBox.from_center(cx, cy, w, h)

    def format(self) -> str:
        return ",".join(_fmt(v) for v in (self.x, self.y, self.w, self.h))


def _fmt(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def as_boxes(boxes) -> np.ndarray:
    arr = np.array([b.as_array() if isinstance(b, BBox) else b for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def _overlap(a: np.ndarray, b: np.ndarray):
    # areas come from the same corner differences as the intersection, so a box
    # compared with itself has IoU exactly 1 even when x + w rounds
    ax2, ay2, bx2, by2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    ix = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(a[:, 0], b[:, 0]))
    iy = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(a[:, 1], b[:, 1]))
    inter = ix * iy
    union = (ax2 - a[:, 0]) * (ay2 - a[:, 1]) + (bx2 - b[:, 0]) * (by2 - b[:, 1]) - inter
    cw = np.maximum(ax2, bx2) - np.minimum(a[:, 0], b[:, 0])
    ch = np.maximum(ay2, by2) - np.minimum(a[:, 1], b[:, 1])
    return inter, union, cw * ch


def iou(a, b) -> np.ndarray:
    """Per-row IoU of two [N, 4] xywh arrays; empty/degenerate unions give 0."""
    inter, union, _ = _overlap(as_boxes(a), as_boxes(b))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def giou(a, b) -> np.ndarray:
    a, b = as_boxes(a), as_boxes(b)
    inter, union, enclose = _overlap(a, b)
    union = np.maximum(union, 1e-9)
    enclose = np.maximum(enclose, 1e-9)
    return iou(a, b) - (enclose - union) / enclose


def center_distance(a, b) -> np.ndarray:
    a, b = as_boxes(a), as_boxes(b)
    ca = a[:, :2] + a[:, 2:] / 2
    cb = b[:, :2] + b[:, 2:] / 2
    return np.sqrt(((ca - cb) ** 2).sum(axis=1))
