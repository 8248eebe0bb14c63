"""Synthetic aerial-style sequences, frame/annotation I/O and training pairs.

On-disk layout of one sequence::

    <seq>/img/000001.ppm ...    binary P6, 8-bit RGB
    <seq>/groundtruth.csv       one "x,y,w,h" line per frame
    <seq>/attributes.txt        comma-separated tags
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .boxes import BBox
from .heads import TrainTarget, build_target

ATTRIBUTES = ("FM", "BC", "DEF", "OCC", "SV", "IV")
FAST_MOTION_PX = 5.0
MIN_EXTENT = 8.0


# ---------------------------------------------------------------- PPM


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 uint8, got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


Loader = Callable[[Path], np.ndarray]
_LOADERS: dict[str, Loader] = {".ppm": read_ppm}


def register_loader(suffix: str, loader: Loader) -> None:
    """Let real datasets (jpg, png, ...) plug in their own decoder."""
    _LOADERS[suffix.lower()] = loader


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        loader = _LOADERS[path.suffix.lower()]
    except KeyError:
        raise ValueError(f"no loader registered for {path.suffix!r}") from None
    return loader(path)


# ---------------------------------------------------------------- annotations


def read_boxes(path) -> list[BBox]:
    boxes = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.replace("\t", ",").replace(" ", ",").split(",")
        vals = [float(p) for p in parts if p]
        if len(vals) != 4:
            raise ValueError(f"{path}: expected 4 values per line, got {line!r}")
        boxes.append(BBox(*vals))
    return boxes


def write_boxes(path, boxes) -> None:
    Path(path).write_text("".join(b.format() + "\n" for b in boxes))


@dataclass
class SequenceDataset:
    root: Path
    frames: list[Path]
    boxes: list[BBox]
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise ValueError(f"{self.root}: {len(self.frames)} frames but {len(self.boxes)} boxes")

    @property
    def name(self) -> str:
        return self.root.name

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> np.ndarray:
        return load_image(self.frames[i])

    def load_all(self) -> list[np.ndarray]:
        return [load_image(p) for p in self.frames]


def load_sequence(root) -> SequenceDataset:
    root = Path(root)
    frames = sorted(p for p in (root / "img").iterdir() if p.suffix.lower() in _LOADERS)
    boxes = read_boxes(root / "groundtruth.csv")
    attr = root / "attributes.txt"
    tags = [t.strip() for t in attr.read_text().split(",") if t.strip()] if attr.exists() else []
    return SequenceDataset(root, frames, boxes, tags)


def load_suite(root) -> list[SequenceDataset]:
    """Every sequence directory (one holding groundtruth.csv) below ``root``."""
    root = Path(root)
    if (root / "groundtruth.csv").exists():
        return [load_sequence(root)]
    return [load_sequence(p) for p in sorted(root.iterdir()) if (p / "groundtruth.csv").exists()]


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    name: str = "seq"
    frame_width: int = 128
    frame_height: int = 128
    frames: int = 100
    shape: str = "rect"
    object_w: float = 20.0
    object_h: float = 16.0
    motion: str = "linear"
    speed: float = 1.5
    direction: float = 0.6
    amplitude: float = 30.0
    period: float = 80.0
    scale_drift: float = 0.0
    deform: float = 0.0
    occluder: bool = False
    clutter: int = 0
    illumination: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shape not in ("rect", "ellipse"):
            raise ValueError(f"shape must be rect or ellipse, got {self.shape!r}")
        if self.motion not in ("linear", "sinusoidal", "random_walk"):
            raise ValueError(f"unknown motion model {self.motion!r}")
        if min(self.object_w, self.object_h) < MIN_EXTENT:
            raise ValueError(f"object extents must be >= {MIN_EXTENT} px")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")


def sinusoidal_center(t: float, cfg: SynthConfig) -> tuple[float, float]:
    """Closed-form path of the sinusoidal motion model (a figure-eight)."""
    phase = 2 * math.pi * t / cfg.period
    cx = cfg.frame_width / 2 + cfg.amplitude * math.sin(phase)
    cy = cfg.frame_height / 2 + 0.5 * cfg.amplitude * math.sin(2 * phase)
    return cx, cy


def _reflect(v: float, lo: float, hi: float) -> tuple[float, bool]:
    if v < lo:
        return 2 * lo - v, True
    if v > hi:
        return 2 * hi - v, True
    return v, False


def _path(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame centers [T, 2] and extents [T, 2]."""
    n, fw, fh = cfg.frames, cfg.frame_width, cfg.frame_height
    t = np.arange(n, dtype=np.float64)
    scale = np.clip((1.0 + cfg.scale_drift) ** t, 0.4, 2.5)
    wobble = 1.0 + cfg.deform * np.sin(2 * np.pi * t / 40.0)
    w = np.clip(cfg.object_w * scale * wobble, MIN_EXTENT, fw / 3)
    h = np.clip(cfg.object_h * scale / wobble, MIN_EXTENT, fh / 3)
    margin = 0.5 * max(cfg.object_w, cfg.object_h)
    centers = np.zeros((n, 2))
    if cfg.motion == "sinusoidal":
        centers[:] = [sinusoidal_center(k, cfg) for k in range(n)]
    else:
        pos = np.array([rng.uniform(margin, fw - margin), rng.uniform(margin, fh - margin)])
        vel = cfg.speed * np.array([math.cos(cfg.direction), math.sin(cfg.direction)])
        for k in range(n):
            centers[k] = pos
            if cfg.motion == "random_walk":
                vel = vel + rng.normal(0.0, 0.35 * max(cfg.speed, 0.5), size=2)
                norm = np.linalg.norm(vel)
                if norm > 2 * cfg.speed and norm > 0:
                    vel *= 2 * cfg.speed / norm
            nxt = pos + vel
            nxt[0], bx = _reflect(nxt[0], margin, fw - margin)
            nxt[1], by = _reflect(nxt[1], margin, fh - margin)
            if bx:
                vel[0] = -vel[0]
            if by:
                vel[1] = -vel[1]
            pos = nxt
    return centers, np.stack([w, h], axis=1)


def _smooth_texture(rng: np.random.Generator, h: int, w: int, cells: int, amp: float) -> np.ndarray:
    coarse = rng.uniform(-amp, amp, size=(cells + 1, cells + 1, 3))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


@dataclass(frozen=True)
class _Sprite:
    base: np.ndarray  # [3]
    accent: np.ndarray  # [3]
    period: float
    ellipse: bool


def _new_sprite(rng: np.random.Generator, ellipse: bool) -> _Sprite:
    base = rng.uniform(40, 230, size=3)
    accent = 255.0 - base
    return _Sprite(base, accent, float(rng.uniform(3.0, 7.0)), ellipse)


def _draw(frame: np.ndarray, sprite: _Sprite, cx: float, cy: float, w: float, h: float) -> None:
    fh, fw = frame.shape[:2]
    x0, x1 = int(max(0, math.floor(cx - w / 2))), int(min(fw, math.ceil(cx + w / 2)))
    y0, y1 = int(max(0, math.floor(cy - h / 2))), int(min(fh, math.ceil(cy + h / 2)))
    if x1 <= x0 or y1 <= y0:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    u = (xx + 0.5 - cx) / (w / 2)
    v = (yy + 0.5 - cy) / (h / 2)
    if sprite.ellipse:
        inside = u * u + v * v <= 1.0
    else:
        inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    # stripes in object coordinates so the pattern travels with the object
    stripes = (np.floor((u + v + 2.0) * w / (2 * sprite.period)) % 2 == 0)[..., None]
    colour = np.where(stripes, sprite.base, sprite.accent)
    region = frame[y0:y1, x0:x1]
    region[inside] = colour[inside]


def render_sequence(cfg: SynthConfig) -> tuple[list[np.ndarray], list[BBox], list[str]]:
    """Frames (HxWx3 uint8), ground truth and tags, without touching the disk."""
    rng = np.random.default_rng(cfg.seed)
    fw, fh = cfg.frame_width, cfg.frame_height
    centers, sizes = _path(cfg, rng)
    background = 128.0 + _smooth_texture(rng, fh, fw, 6, 70.0) + rng.normal(0, 6.0, size=(fh, fw, 3))
    target = _new_sprite(rng, cfg.shape == "ellipse")

    distractors = []
    for _ in range(cfg.clutter):
        sprite = _new_sprite(rng, cfg.shape == "ellipse")
        # clutter mimics the target's colours with a different stripe period
        sprite = replace(sprite, base=np.clip(target.base + rng.normal(0, 25, 3), 0, 255),
                         accent=np.clip(target.accent + rng.normal(0, 25, 3), 0, 255))
        dcfg = replace(cfg, motion="random_walk", seed=int(rng.integers(1 << 31)), scale_drift=0.0, deform=0.0)
        dc, ds = _path(dcfg, np.random.default_rng(dcfg.seed))
        distractors.append((sprite, dc, ds))

    occ_frame = cfg.frames // 2
    occ_w = 1.3 * cfg.object_w
    occ_speed = 3.0
    occ_colour = rng.uniform(60, 200, size=3)

    frames, boxes = [], []
    for k in range(cfg.frames):
        frame = background.copy()
        for sprite, dc, ds in distractors:
            _draw(frame, sprite, dc[k, 0], dc[k, 1], ds[k, 0], ds[k, 1])
        cx, cy = centers[k]
        w, h = sizes[k]
        _draw(frame, target, cx, cy, w, h)
        if cfg.occluder:
            ox = centers[occ_frame, 0] + occ_speed * (k - occ_frame)
            x0, x1 = int(max(0, round(ox - occ_w / 2))), int(min(fw, round(ox + occ_w / 2)))
            if x1 > x0:
                frame[:, x0:x1] = occ_colour
        if cfg.illumination:
            frame = frame * (1.0 + cfg.illumination * math.sin(2 * math.pi * k / 50.0))
        frames.append(np.clip(np.rint(frame), 0, 255).astype(np.uint8))
        boxes.append(BBox.from_center(float(cx), float(cy), float(w), float(h)))
    return frames, boxes, tags_for(cfg, centers)


def tags_for(cfg: SynthConfig, centers: np.ndarray) -> list[str]:
    tags = []
    steps = np.linalg.norm(np.diff(centers, axis=0), axis=1) if len(centers) > 1 else np.zeros(1)
    if steps.max() >= FAST_MOTION_PX:
        tags.append("FM")
    if cfg.clutter:
        tags.append("BC")
    if cfg.deform:
        tags.append("DEF")
    if cfg.occluder:
        tags.append("OCC")
    if cfg.scale_drift:
        tags.append("SV")
    if cfg.illumination:
        tags.append("IV")
    return tags


def generate(cfg: SynthConfig, out_dir) -> SequenceDataset:
    """Render a sequence into ``out_dir`` (created if needed)."""
    root = Path(out_dir)
    (root / "img").mkdir(parents=True, exist_ok=True)
    frames, boxes, tags = render_sequence(cfg)
    paths = []
    for k, frame in enumerate(frames, start=1):
        p = root / "img" / f"{k:06d}.ppm"
        write_ppm(p, frame)
        paths.append(p)
    write_boxes(root / "groundtruth.csv", boxes)
    (root / "attributes.txt").write_text(",".join(tags) + "\n")
    return SequenceDataset(root, paths, read_boxes(root / "groundtruth.csv"), tags)


def standard_suite(seed: int = 0, frames: int = 100) -> list[SynthConfig]:
    """Twelve sequences, two per attribute tag, each pair differing in shape and motion."""
    rng = np.random.default_rng(seed)
    out = []
    specs = {
        "FM": dict(speed=5.5, motion="linear"),
        "BC": dict(clutter=3, motion="random_walk", speed=1.5),
        "DEF": dict(deform=0.3, motion="sinusoidal", amplitude=28.0),
        "OCC": dict(occluder=True, motion="linear", speed=1.0),
        "SV": dict(scale_drift=0.006, motion="random_walk", speed=1.2),
        "IV": dict(illumination=0.3, motion="sinusoidal", amplitude=32.0),
    }
    for tag, extra in specs.items():
        for k in range(2):
            kw = dict(extra)
            if tag == "SV" and k == 1:
                kw["scale_drift"] = -0.004
            if kw.get("motion") == "random_walk" and k == 1:
                kw["motion"] = "linear"
            out.append(
                SynthConfig(
                    name=f"{tag.lower()}_{k}",
                    frames=frames,
                    shape="rect" if k == 0 else "ellipse",
                    object_w=float(rng.uniform(16, 26)),
                    object_h=float(rng.uniform(14, 24)),
                    direction=float(rng.uniform(0, 2 * math.pi)),
                    period=float(rng.uniform(60, 100)),
                    seed=int(rng.integers(1 << 31)),
                    **kw,
                )
            )
    return out


def generate_suite(out_dir, seed: int = 0, frames: int = 100) -> list[SequenceDataset]:
    root = Path(out_dir)
    return [generate(cfg, root / cfg.name) for cfg in standard_suite(seed, frames)]


# ---------------------------------------------------------------- cropping


def context_side(box: BBox) -> float:
    """Square template crop side ``sqrt((w + p)(h + p))`` with ``p = (w + h) / 2``."""
    p = (box.w + box.h) / 2
    return math.sqrt((box.w + p) * (box.h + p))


def crop(image: np.ndarray, cx: float, cy: float, side: float, out_size: int) -> np.ndarray:
    """Bilinear square crop -> [3, out, out] float32 in [0, 1].

    Samples falling outside the frame take the frame's per-channel mean.
    """
    fh, fw = image.shape[:2]
    img = image.astype(np.float32)
    mean = img.reshape(-1, 3).mean(axis=0)
    step = side / out_size
    coords = (np.arange(out_size) + 0.5) * step - 0.5
    ys = cy - side / 2 + coords
    xs = cx - side / 2 + coords
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0).astype(np.float32)[:, None, None]
    fx = (xs - x0).astype(np.float32)[None, :, None]

    def sample(yi, xi):
        valid = ((yi >= 0) & (yi < fh))[:, None] & ((xi >= 0) & (xi < fw))[None, :]
        vals = img[np.clip(yi, 0, fh - 1)][:, np.clip(xi, 0, fw - 1)]
        return np.where(valid[..., None], vals, mean)

    out = (
        (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1))
        + fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1))
    )
    return (out.transpose(2, 0, 1) / 255.0).astype(np.float32)


def box_in_crop(box: BBox, cx: float, cy: float, side: float, out_size: int) -> BBox:
    s = out_size / side
    return BBox((box.x - (cx - side / 2)) * s, (box.y - (cy - side / 2)) * s, box.w * s, box.h * s)


# ---------------------------------------------------------------- training pairs


@dataclass(frozen=True)
class PairConfig:
    template_size: int = 40
    search_size: int = 72
    stride: int = 8
    max_gap: int = 20
    max_shift: float = 16.0  # search-crop pixels
    scale_jitter: float = 0.15  # log-uniform half range
    flip_prob: float = 0.5

    @property
    def grid(self) -> int:
        return self.search_size // self.stride


class TrainingPair(NamedTuple):
    template: np.ndarray
    template_box: BBox
    search: np.ndarray
    search_box: BBox
    target: TrainTarget


def pair_from_frames(
    frame_a: np.ndarray,
    box_a: BBox,
    frame_b: np.ndarray,
    box_b: BBox,
    cfg: PairConfig,
    shift: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    flip: bool = False,
) -> TrainingPair:
    """Template around ``box_a``; search around ``box_b`` displaced by ``shift`` search pixels.

    A positive shift moves the crop window, so the target lands that far in
    the opposite direction inside the search crop.
    """
    sz = context_side(box_a)
    cxa, cya = box_a.center
    tmpl = crop(frame_a, cxa, cya, sz, cfg.template_size)
    tbox = box_in_crop(box_a, cxa, cya, sz, cfg.template_size)

    sx = context_side(box_b) * scale * cfg.search_size / cfg.template_size
    px = sx / cfg.search_size
    cxb, cyb = box_b.center
    cxb += shift[0] * px
    cyb += shift[1] * px
    srch = crop(frame_b, cxb, cyb, sx, cfg.search_size)
    sbox = box_in_crop(box_b, cxb, cyb, sx, cfg.search_size)
    if flip:
        tmpl = tmpl[:, :, ::-1].copy()
        srch = srch[:, :, ::-1].copy()
        tbox = BBox(cfg.template_size - tbox.x - tbox.w, tbox.y, tbox.w, tbox.h)
        sbox = BBox(cfg.search_size - sbox.x - sbox.w, sbox.y, sbox.w, sbox.h)
    target = build_target(sbox, cfg.grid, cfg.stride, cfg.search_size)
    return TrainingPair(tmpl, tbox, srch, sbox, target)


def make_training_pair(
    frames: list[np.ndarray], boxes: list[BBox], rng: np.random.Generator, cfg: PairConfig
) -> TrainingPair:
    """Random pair of frames at most ``max_gap`` apart, jittered on the search side."""
    n = len(frames)
    if n < 2:
        raise ValueError("need at least two frames to sample a pair")
    a = int(rng.integers(n))
    lo, hi = max(0, a - cfg.max_gap), min(n - 1, a + cfg.max_gap)
    b = int(rng.integers(lo, hi + 1))
    shift = tuple(float(v) for v in rng.uniform(-cfg.max_shift, cfg.max_shift, size=2))
    scale = float(np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)))
    flip = bool(rng.random() < cfg.flip_prob)
    return pair_from_frames(frames[a], boxes[a], frames[b], boxes[b], cfg, shift, scale, flip)
