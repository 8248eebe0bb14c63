"""Sectioned INI run configuration.

Every field of the module config dataclasses is a key in the section of the
same name; ``[run]`` holds the seed, the desk/large preset and the variant::

    [run]
    preset = desk
    variant = full
    seed = 0

    [train]
    epochs = 30

Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .data import SynthConfig
from .fusion import FusionConfig
from .heads import HeadsConfig, LossConfig
from .model import VARIANTS, ModelConfig
from .tape import TapeConfig
from .train import TrainConfig

PRESETS = ("desk", "large")

SECTIONS: dict[str, type] = {
    "backbone": BackboneConfig,
    "tape": TapeConfig,
    "fusion": FusionConfig,
    "heads": HeadsConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0
    preset: str = "desk"

    @property
    def variant(self) -> str:
        return self.model.variant

    def with_variant(self, variant: str) -> "RunConfig":
        return replace(self, model=self.model.with_variant(variant))


def _convert(raw: str, default: Any, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _defaults(cls: type, base) -> dict[str, Any]:
    return {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}


def _build(cls: type, base, values: dict[str, str], section: str):
    known = _defaults(cls, base)
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        kwargs[key] = _convert(raw, known[key], f"[{section}] {key}")
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keys are case sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    for section in cp.sections():
        if section not in SECTIONS and section != "run":
            raise ConfigError(f"unknown section [{section}]")

    run = dict(cp["run"]) if cp.has_section("run") else {}
    for key in run:
        if key not in ("seed", "preset", "variant"):
            raise ConfigError(f"unknown key [run] {key}")
    preset = run.get("preset", "desk").strip()
    if preset not in PRESETS:
        raise ConfigError(f"[run] preset must be one of {PRESETS}, got {preset!r}")
    variant = run.get("variant", "full").strip()
    if variant not in VARIANTS:
        raise ConfigError(f"[run] variant must be one of {VARIANTS}, got {variant!r}")
    seed = _convert(run.get("seed", "0"), 0, "[run] seed")

    large = preset == "large"
    bases = {
        "backbone": BackboneConfig.large() if large else BackboneConfig(),
        "tape": TapeConfig(),
        "fusion": FusionConfig(),
        "heads": HeadsConfig(),
        "loss": LossConfig(),
        "train": TrainConfig.large() if large else TrainConfig(),
        "synth": SynthConfig(),
    }
    built = {
        name: _build(SECTIONS[name], base, dict(cp[name]) if cp.has_section(name) else {}, name)
        for name, base in bases.items()
    }
    if not cp.has_section("train") or "seed" not in cp["train"]:
        built["train"] = replace(built["train"], seed=seed)
    if not cp.has_section("synth") or "seed" not in cp["synth"]:
        built["synth"] = replace(built["synth"], seed=seed)
    try:
        model = ModelConfig(
            backbone=built["backbone"],
            tape=built["tape"],
            fusion=built["fusion"],
            heads=built["heads"],
            loss=built["loss"],
            variant=variant,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model=model, train=built["train"], synth=built["synth"], seed=seed, preset=preset)


def load(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text)


def dump(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {"preset": cfg.preset, "variant": cfg.variant, "seed": str(cfg.seed)}
    objs = {
        "backbone": cfg.model.backbone,
        "tape": cfg.model.tape,
        "fusion": cfg.model.fusion,
        "heads": cfg.model.heads,
        "loss": cfg.model.loss,
        "train": cfg.train,
        "synth": cfg.synth,
    }
    for name, obj in objs.items():
        cp[name] = {
            k: " ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
            for k, v in _defaults(SECTIONS[name], obj).items()
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
