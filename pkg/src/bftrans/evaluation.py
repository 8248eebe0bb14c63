"""One-pass evaluation: success (overlap) and precision (center error) curves.

Threshold rules, fixed so golden values stay stable:

* success: a frame passes threshold ``t`` when ``IoU >= t`` on the 21-point
  grid 0.00, 0.05, ..., 1.00; AUC is the mean of the curve.
* precision: a frame passes threshold ``t`` when the center distance is
  ``<= t`` pixels on the grid 0, 1, ..., 50; the headline is P@20.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .boxes import as_boxes, center_distance, iou
from .data import ATTRIBUTES
from .tensor import ContractError

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)


@dataclass
class EvalCurve:
    thresholds: np.ndarray
    values: np.ndarray
    auc: float
    p20: float | None = None

    def at(self, t: float) -> float:
        idx = int(np.argmin(np.abs(self.thresholds - t)))
        return float(self.values[idx])


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = as_boxes(pred), as_boxes(gt)
    if len(p) != len(g):
        raise ContractError(f"{len(p)} predicted boxes vs {len(g)} ground-truth boxes")
    if len(p) == 0:
        raise ContractError("evaluation needs at least one frame")
    return p, g


def success_curve(pred, gt) -> EvalCurve:
    p, g = _check(pred, gt)
    ov = iou(p, g)
    values = np.array([(ov >= t).mean() for t in SUCCESS_THRESHOLDS])
    return EvalCurve(SUCCESS_THRESHOLDS.copy(), values, float(values.mean()))


def precision_curve(pred, gt) -> EvalCurve:
    p, g = _check(pred, gt)
    dist = center_distance(p, g)
    values = np.array([(dist <= t).mean() for t in PRECISION_THRESHOLDS])
    return EvalCurve(PRECISION_THRESHOLDS.copy(), values, float(values.mean()), float(values[20]))


@dataclass
class SequenceScore:
    name: str
    success: EvalCurve
    precision: EvalCurve
    tags: tuple[str, ...] = ()


def score_sequence(name: str, pred, gt, tags: Sequence[str] = ()) -> SequenceScore:
    return SequenceScore(name, success_curve(pred, gt), precision_curve(pred, gt), tuple(tags))


def attribute_report(scores: Sequence[SequenceScore]) -> dict[str, float]:
    """Mean success AUC over the sequences carrying each tag.

    Tags outside the known vocabulary, and untagged sequences, pool under
    ``"other"``.
    """
    buckets: dict[str, list[float]] = {}
    for s in scores:
        keys = {t if t in ATTRIBUTES else "other" for t in s.tags} or {"other"}
        for k in keys:
            buckets.setdefault(k, []).append(s.success.auc)
    order = [a for a in ATTRIBUTES if a in buckets] + (["other"] if "other" in buckets else [])
    return {k: float(np.mean(buckets[k])) for k in order}


def overall(scores: Sequence[SequenceScore]) -> tuple[float, float]:
    """Sequence-averaged success AUC and P@20."""
    return (
        float(np.mean([s.success.auc for s in scores])),
        float(np.mean([s.precision.p20 for s in scores])),
    )


def format_report(scores: Sequence[SequenceScore], attributes: Mapping[str, float] | None = None) -> str:
    """CSV: one row per sequence, an ``ALL`` row, then ``attr:<TAG>`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence", "success_auc", "precision_p20", "tags"])
    for s in scores:
        w.writerow([s.name, f"{s.success.auc:.6f}", f"{s.precision.p20:.6f}", " ".join(s.tags)])
    auc, p20 = overall(scores)
    w.writerow(["ALL", f"{auc:.6f}", f"{p20:.6f}", ""])
    for tag, value in (attributes or {}).items():
        w.writerow([f"attr:{tag}", f"{value:.6f}", "", ""])
    return buf.getvalue()


def write_report(path, scores: Sequence[SequenceScore], attributes: Mapping[str, float] | None = None) -> None:
    Path(path).write_text(format_report(scores, attributes))


def load_results(path) -> np.ndarray:
    from .data import read_boxes

    return as_boxes(read_boxes(Path(path)))
