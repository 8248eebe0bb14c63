"""Online one-pass tracking loop around a trained model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .backbone import FeaturePair
from .boxes import BBox
from .data import context_side, crop
from .heads import cosine_window, decode
from .model import ModelConfig, forward, template_features
from .params import ParamStore


class TrackerInitError(ValueError):
    pass


@dataclass
class TrackState:
    box: BBox
    template: FeaturePair
    crop_side: float  # template crop side in frame pixels
    frame_size: tuple[int, int]  # (width, height)


class Tracker:
    def __init__(self, params: ParamStore, cfg: ModelConfig, use_window: bool = True):
        self.params = params
        self.cfg = cfg
        g = cfg.grid
        self.window = cosine_window(g, g) if use_window else None

    def init(self, frame: np.ndarray, box: BBox) -> TrackState:
        if box.w <= 1 or box.h <= 1:
            raise TrackerInitError(f"degenerate init box {box}")
        fh, fw = frame.shape[:2]
        box = box.clamp_to(fw, fh, min_size=2.0)
        side = context_side(box)
        cx, cy = box.center
        z = crop(frame, cx, cy, side, self.cfg.backbone.template_size)
        feats = template_features(self.params, self.cfg, T.Tensor(z[None]))
        return TrackState(box, feats, side, (fw, fh))

    def search_side(self, state: TrackState) -> float:
        bb = self.cfg.backbone
        return state.crop_side * bb.search_size / bb.template_size

    def update(self, state: TrackState, frame: np.ndarray) -> BBox:
        bb = self.cfg.backbone
        side = self.search_side(state)
        cx, cy = state.box.center
        x = crop(frame, cx, cy, side, bb.search_size)
        pred = forward(self.params, self.cfg, state.template, T.Tensor(x[None]))
        local, _ = decode(
            pred.cls.data[0],
            pred.offset.data[0],
            pred.size.data[0],
            bb.search_size,
            bb.total_stride,
            self.window,
            self.cfg.heads.window_gamma,
        )
        scale = side / bb.search_size
        lcx, lcy = local.center
        box = BBox.from_center(
            cx + (lcx - bb.search_size / 2) * scale,
            cy + (lcy - bb.search_size / 2) * scale,
            local.w * scale,
            local.h * scale,
        )
        fw, fh = state.frame_size
        box = _sanitize(box, state.box).clamp_to(fw, fh, min_size=2.0)
        state.box = box
        state.crop_side = context_side(box)
        return box


def _sanitize(box: BBox, prev: BBox) -> BBox:
    vals = np.array([box.x, box.y, box.w, box.h])
    if not np.all(np.isfinite(vals)) or box.w <= 0 or box.h <= 0:
        return prev
    return box


def track_sequence(tracker: Tracker, frames: Iterable[np.ndarray], init_box: BBox) -> list[BBox]:
    """One-pass run: the first output echoes ``init_box``."""
    it = iter(frames)
    first = next(it)
    state = tracker.init(first, init_box)
    out = [init_box]
    for frame in it:
        out.append(tracker.update(state, frame))
    return out
