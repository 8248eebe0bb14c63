"""Desk-scale training: AdamW with two learning-rate groups and a step decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .boxes import BBox
from .data import PairConfig, make_training_pair
from .model import ModelConfig, batch_loss, decays, is_backbone
from .params import ParamStore

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "loss", "l_focal", "l_l1", "l_giou")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, checkpoint: Path | None):
        self.iteration = iteration
        self.checkpoint = checkpoint
        where = f"; last good checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at iteration {iteration}{where}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    pairs_per_epoch: int = 500
    batch_size: int = 8
    lr: float = 4e-4
    lr_backbone: float = 4e-5
    weight_decay: float = 1e-4
    decay_fraction: float = 0.8
    decay_factor: float = 0.1
    grad_clip: float = 10.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_gap: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr_backbone > self.lr:
            raise ValueError("lr_backbone must not exceed lr")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.epochs < 1 or self.pairs_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, pairs_per_epoch and batch_size must be positive")

    @classmethod
    def large(cls) -> "TrainConfig":
        return cls(epochs=300, pairs_per_epoch=60000, batch_size=128)

    @property
    def iters_per_epoch(self) -> int:
        return max(1, self.pairs_per_epoch // self.batch_size)

    @property
    def decay_epoch(self) -> int:
        return int(round(self.decay_fraction * self.epochs))


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay, per-parameter learning rates."""

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ParamStore, lrs: dict[str, float], weight_decay: dict[str, float]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            lr = lrs[name]
            wd = weight_decay[name]
            if lr == 0.0:
                continue
            if wd:
                p.data *= 1.0 - lr * wd
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for t in params.tensors()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for t in params.tensors():
            t.grad *= scale
    return total


@dataclass
class TrainResult:
    losses: list[tuple[int, float, float, float, float]]
    iterations: int


Sequences = Sequence[tuple[list[np.ndarray], list[BBox]]]


def assemble_batch(sequences: Sequences, rng: np.random.Generator, pair_cfg: PairConfig, n: int):
    pairs = []
    for _ in range(n):
        frames, boxes = sequences[int(rng.integers(len(sequences)))]
        pairs.append(make_training_pair(frames, boxes, rng, pair_cfg))
    z = T.Tensor(np.stack([p.template for p in pairs]))
    x = T.Tensor(np.stack([p.search for p in pairs]))
    return z, x, [p.target for p in pairs]


def pair_config(model_cfg: ModelConfig, tcfg: TrainConfig) -> PairConfig:
    bb = model_cfg.backbone
    return PairConfig(
        template_size=bb.template_size, search_size=bb.search_size, stride=bb.total_stride, max_gap=tcfg.max_gap
    )


def train(
    params: ParamStore,
    model_cfg: ModelConfig,
    sequences: Sequences,
    tcfg: TrainConfig,
    out: str | Path | None = None,
    loss_log: str | Path | None = None,
    on_iter: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Optimise ``params`` in place on random pairs drawn from ``sequences``.

    Writes a BFT1 checkpoint to ``out`` at the end (and after every epoch) and a
    per-iteration CSV loss log to ``loss_log``.
    """
    if not sequences:
        raise ValueError("training needs at least one sequence")
    rng = np.random.default_rng(tcfg.seed)
    pcfg = pair_config(model_cfg, tcfg)
    opt = AdamW(tcfg.betas, tcfg.eps)
    wd = {n: (tcfg.weight_decay if decays(n) else 0.0) for n in params}
    out = Path(out) if out else None
    losses: list[tuple[int, float, float, float, float]] = []
    last_good: Path | None = None
    log_fh = open(loss_log, "w", newline="") if loss_log else None
    writer = csv.writer(log_fh, lineterminator="\n") if log_fh else None
    if writer:
        writer.writerow(LOG_HEADER)
    it = 0
    try:
        for epoch in range(tcfg.epochs):
            factor = tcfg.decay_factor if epoch >= tcfg.decay_epoch else 1.0
            lrs = {n: factor * (tcfg.lr_backbone if is_backbone(n) else tcfg.lr) for n in params}
            for _ in range(tcfg.iters_per_epoch):
                z, x, targets = assemble_batch(sequences, rng, pcfg, tcfg.batch_size)
                try:
                    terms = batch_loss(params, model_cfg, z, x, targets)
                    loss = terms.total.item()
                except T.NonFiniteError:
                    loss = float("nan")
                if not math.isfinite(loss):
                    raise TrainingDiverged(it, last_good)
                T.backward(terms.total, params=params)
                clip_grad_norm(params, tcfg.grad_clip)
                opt.step(params, lrs, wd)
                row = (it, loss, terms.focal, terms.l1, terms.giou)
                losses.append(row)
                if writer:
                    writer.writerow([it] + [repr(float(v)) for v in row[1:]])
                if on_iter:
                    on_iter(it, loss)
                it += 1
            log.info("epoch %d/%d loss %.4f", epoch + 1, tcfg.epochs, losses[-1][1])
            if out:
                params.save(out)
                last_good = out
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(losses, it)


def load_sequences(datasets) -> list[tuple[list[np.ndarray], list[BBox]]]:
    return [(ds.load_all(), list(ds.boxes)) for ds in datasets]
