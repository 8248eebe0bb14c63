"""Built-in verification: gradient checks per scope and a dataset-free self test."""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .boxes import BBox
from .fusion import FusedPair, FusionConfig, fuse, init_fusion
from .gradcheck import GradcheckReport, gradcheck
from .heads import HeadsConfig, build_target, giou_loss, init_heads, predict, total_loss
from .model import ModelConfig, batch_loss, init_params
from .params import ParamStore, decode_checkpoint, encode_checkpoint
from .tape import TapeConfig, encode, init_tape
from .tensor import Tensor

SCOPES = ("tensor", "tape", "fusion", "heads", "model")


def _randomize(params: ParamStore, rng: np.random.Generator, scale: float = 0.3) -> ParamStore:
    # fresh init leaves output layers and alpha at zero, which would hide their gradients
    for _, t in params.items():
        t.data[...] = rng.normal(0.0, scale, t.shape)
    return params


def _tensor_case(rng):
    ps = ParamStore()
    ps.add("w", rng.normal(0, 0.5, (4, 3, 3, 3)))
    ps.add("b", rng.normal(0, 0.1, 4))
    ps.add("m", rng.normal(0, 0.5, (4, 4)))
    ps.add("z", rng.normal(0, 0.5, (4, 3, 3)))
    x = rng.uniform(-1, 1, (2, 3, 6, 6))

    def f(p):
        h = T.relu(T.conv2d(Tensor(x), p["w"], p["b"], stride=1, pad=1))
        r = T.xcorr_depthwise(T.expand(T.reshape(p["z"], (1, 4, 3, 3)), (2, 4, 3, 3)), h)
        g = T.add(T.global_pool(r, "max"), T.global_pool(r, "avg"))
        s = T.mul(T.expand(T.sigmoid(g), r.shape), T.expand(T.channel_pool(r, "max"), r.shape))
        toks = T.reshape(s, (2, 4, 36))
        att = T.softmax(T.matmul(p["m"], toks), axis=-1)
        a, b = T.split(att, axis=-1, at=12)
        return T.add(T.sum_(T.concat([T.square(a), T.abs_(b)], axis=-1)), T.mean(T.exp(T.clamp(p["m"], -0.5, 0.5))))

    return f, ps, None


def _tape_case(rng):
    cfg = TapeConfig(ratio=2, multiplicative=False)
    ps = _randomize(_init(lambda p, r: init_tape(p, "tape", 6, cfg, r), rng), rng, 0.5)
    f_in, w = rng.normal(size=(2, 2, 6, 5, 5))

    def f(p):
        return T.sum_(T.mul(encode(Tensor(f_in), p, "tape", cfg), Tensor(w)))

    return f, ps, None


def _fusion_case(rng):
    tape = TapeConfig(ratio=2, self_attention=True)
    ps = _randomize(_init(lambda p, r: init_fusion(p, 4, FusionConfig(), tape, r), rng), rng)
    m3, m4, w3, w4 = rng.normal(size=(4, 1, 4, 3, 3))

    def f(p):
        out = fuse(Tensor(m3), Tensor(m4), p, FusionConfig(), tape)
        return T.add(T.sum_(T.mul(out.m3, Tensor(w3))), T.sum_(T.mul(out.m4, Tensor(w4))))

    return f, ps, 6


def _heads_case(rng):
    ps = _randomize(_init(lambda p, r: init_heads(p, 4, HeadsConfig(), r), rng), rng)
    m3, m4 = rng.normal(size=(2, 2, 4, 4, 4))
    targets = [build_target(BBox.from_center(*rng.uniform(6, 26, 2), *rng.uniform(6, 16, 2)), 4, 8, 32) for _ in range(2)]

    def f(p):
        pred = predict(FusedPair(Tensor(m3), Tensor(m4)), p)
        return total_loss(pred, targets).total

    return f, ps, 6


def _model_case(rng):
    cfg = ModelConfig()  # desk scale
    ps = init_params(cfg, int(rng.integers(1 << 30)))
    for _, t in ps.items():
        if not t.data.any():  # zero-initialised outputs, biases and alpha
            fan_in = int(np.prod(t.shape[1:])) if t.ndim > 1 else 1
            t.data[...] = rng.normal(0.0, 0.1 / math.sqrt(fan_in), t.shape)
    z = rng.uniform(size=(2, 3, cfg.backbone.template_size, cfg.backbone.template_size))
    x = rng.uniform(size=(2, 3, cfg.backbone.search_size, cfg.backbone.search_size))
    s = cfg.backbone.search_size
    targets = [
        build_target(BBox.from_center(*rng.uniform(0.3 * s, 0.7 * s, 2), *rng.uniform(0.15 * s, 0.4 * s, 2)), cfg.grid, cfg.stride, s)
        for _ in range(2)
    ]

    def f(p):
        return batch_loss(p, cfg, Tensor(z), Tensor(x), targets).total

    return f, ps, 2


def _init(fn, rng) -> ParamStore:
    ps = ParamStore()
    fn(ps, rng)
    return ps


CASES: dict[str, Callable] = {
    "tensor": _tensor_case,
    "tape": _tape_case,
    "fusion": _fusion_case,
    "heads": _heads_case,
    "model": _model_case,
}


def run_gradcheck(scope: str, seed: int, tol: float = 1e-4) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    f, ps, per_param = CASES[scope](rng)
    return gradcheck(f, ps, eps=1e-4, tol=tol, max_per_param=per_param, rng=np.random.default_rng(seed))


def scopes_for(name: str) -> tuple[str, ...]:
    if name == "all":
        return SCOPES
    if name not in SCOPES:
        raise ValueError(f"unknown scope {name!r}; expected one of {SCOPES + ('all',)}")
    return (name,)


# ---------------------------------------------------------------- self test


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _loop_conv(x, w, stride, pad):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                out[oc, i, j] = float((xp[:, i * stride : i * stride + k, j * stride : j * stride + k] * w[oc]).sum())
    return out


def _check_ops():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        a, b = rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (4, 3))
        ref = np.array([[sum(a[i, t] * b[t, j] for t in range(4)) for j in range(3)] for i in range(5)])
        worst = max(worst, np.abs(T.matmul(Tensor(a), Tensor(b)).data - ref).max())
        x, w = rng.uniform(-1, 1, (2, 6, 6)), rng.uniform(-1, 1, (3, 2, 3, 3))
        worst = max(worst, np.abs(T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data - _loop_conv(x, w, 2, 1)).max())
    return worst <= 1e-5, f"max abs err {worst:.2e}"


def _check_softmax():
    rng = np.random.default_rng(1)
    worst = max(abs(T.softmax(Tensor(rng.normal(0, 20, (4, 9)))).data.sum(-1) - 1).max() for _ in range(50))
    return worst <= 1e-6, f"max |sum-1| {worst:.2e}"


def _check_backward():
    ps = ParamStore()
    p = ps.add("p", np.arange(6.0).reshape(2, 3))
    q = ps.add("q", np.ones(2))
    T.backward(T.sum_(T.mul(p, p)), params=ps)
    ok = np.allclose(p.grad, 2 * p.data) and not q.grad.any()
    return ok, "sum(p*p) -> 2p, unused -> 0"


def _check_tape():
    ps = _init(lambda p, r: init_tape(p, "t", 8, TapeConfig(), r), np.random.default_rng(2))
    f = np.random.default_rng(3).normal(size=(8, 5, 5)).astype(np.float32)
    identity = np.array_equal(encode(Tensor(f), ps, "t").data, f)
    for _, t in ps.items():
        t.data[...] = 0
    ps["t.alpha"].data[...] = 1.0
    quarter = np.allclose(encode(Tensor(f), ps, "t").data, f + 0.25, atol=1e-6)
    return identity and quarter, "alpha=0 identity, zero params -> +0.25"


def _check_attention():
    from .fusion import linear_self_attention, init_attention

    rng = np.random.default_rng(4)
    ps = _randomize(_init(lambda p, r: init_attention(p, "a", 6, 2, r), rng), rng)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 40))
        _, w = linear_self_attention(Tensor(rng.normal(0, 3, (1, 6, n))), ps, "a", return_weights=True)
        worst = max(worst, abs(float(w.data.sum()) - 1.0))
    return worst <= 1e-6, f"max |sum-1| {worst:.2e}"


def _check_losses():
    with T.precision(np.float64):
        same = giou_loss(Tensor([[1.0, 2.0, 3.0, 4.0]]), [[1.0, 2.0, 3.0, 4.0]]).item()
        apart = giou_loss(Tensor([[0.0, 0.0, 1.0, 1.0]]), [[2.0, 0.0, 1.0, 1.0]]).item()
    ok = abs(same) <= 1e-6 and abs(apart - 4 / 3) <= 1e-6
    return ok, f"identical {same:.1e}, separated {apart:.6f}"


def _check_metrics():
    from .evaluation import precision_curve, success_curve

    gt = [BBox(10 + i, 10, 20, 20) for i in range(8)]
    off = [BBox(b.x + 15, b.y + 20, b.w, b.h) for b in gt]
    ok = success_curve(gt, gt).auc == 1.0 and precision_curve(gt, gt).p20 == 1.0 and precision_curve(off, gt).p20 == 0.0
    return ok, "perfect -> 1.0/1.0, 25px offset -> P@20 0.0"


def _check_synth_and_io():
    from .data import SynthConfig, generate, load_sequence

    with tempfile.TemporaryDirectory() as tmp:
        cfg = SynthConfig(frames=5, occluder=True, seed=7)
        a, b = generate(cfg, Path(tmp) / "a"), generate(cfg, Path(tmp) / "b")
        same = all(p.read_bytes() == q.read_bytes() for p, q in zip(a.frames, b.frames))
        back = load_sequence(Path(tmp) / "a")
        ok = same and back.tags == ["OCC"] and len(back) == 5
    ps = init_params(ModelConfig(), 0)
    rt = decode_checkpoint(encode_checkpoint(ps))
    ok = ok and all(np.array_equal(rt[n].data, t.data) for n, t in ps.items())
    return ok, "synthetic determinism, PPM/CSV layout, checkpoint round trip"


def _check_forward():
    from .tracker import Tracker, track_sequence
    from .data import SynthConfig, render_sequence

    cfg = ModelConfig()
    frames, boxes, _ = render_sequence(SynthConfig(frames=4, seed=1))
    out = track_sequence(Tracker(init_params(cfg, 0), cfg), frames, boxes[0])
    ok = all(math.isfinite(b.x) and b.w > 0 and b.h > 0 for b in out)
    return ok, "zero-init model tracks without NaN"


def _check_gradients():
    worst = 0.0
    for scope in ("tensor", "tape", "fusion", "heads"):
        rep = run_gradcheck(scope, 0)
        worst = max(worst, rep.max_rel_err)
    return worst <= 1e-4, f"max rel err {worst:.2e}"


SELFTESTS: dict[str, Callable[[], tuple[bool, str]]] = {
    "tensor.ops": _check_ops,
    "tensor.softmax": _check_softmax,
    "tensor.backward": _check_backward,
    "tape.identity": _check_tape,
    "fusion.normalization": _check_attention,
    "heads.losses": _check_losses,
    "eval.goldens": _check_metrics,
    "data.io": _check_synth_and_io,
    "tracker.smoke": _check_forward,
    "gradcheck": _check_gradients,
}


def selftest() -> Iterator[CheckResult]:
    for name, fn in SELFTESTS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, reported on one line
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        yield CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
