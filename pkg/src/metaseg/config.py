"""Run configuration: dotted-key text files with typed overrides.

A config is a set of ``section.field=value`` lines (``#`` comments and
blank lines allowed). Every key must name an existing field of one of
the sections below — unknown keys are errors, so typos surface
immediately instead of silently training with defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib

from .data import AugmentationConfig, DomainShift
from .network import DecoderConfig, EncoderConfig
from .training import HyperParams


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class DataConfig:
    root: str = ""
    sources: tuple = ()           # domain directory names under root
    target: str = ""              # target domain directory name
    target_labelled: int = 4      # target samples reserved (with labels) for eval


@dataclasses.dataclass
class RunSection:
    method: str = "meta_mdms"
    out_dir: str = "run"


@dataclasses.dataclass
class SynthConfig:
    num_classes: int = 5
    size: tuple = (64, 64)
    n_images: int = 20
    n_sources: int = 3
    seed: int = 0


@dataclasses.dataclass
class RunConfig:
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    run: RunSection = dataclasses.field(default_factory=RunSection)
    encoder: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    decoder: DecoderConfig = dataclasses.field(default_factory=DecoderConfig)
    training: HyperParams = dataclasses.field(default_factory=HyperParams)
    augment: AugmentationConfig = dataclasses.field(
        default_factory=lambda: AugmentationConfig(crop=(64, 64)))
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)


SECTIONS = ("data", "run", "encoder", "decoder", "training", "augment", "synth")


def _parse_scalar(text: str, current):
    if current is None or isinstance(current, float):
        if text.lower() in ("none", "null"):
            return None
        return float(text)
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    return text


def _parse_value(text: str, current):
    text = text.strip()
    if isinstance(current, tuple):
        if not text:
            return ()
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if current:
            return tuple(_parse_scalar(p, current[0]) for p in parts)
        return tuple(_guess_scalar(p) for p in parts)
    return _parse_scalar(text, current)


def _guess_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def apply_override(cfg: RunConfig, key: str, value: str) -> RunConfig:
    """Set one dotted key, rebuilding the section so its checks re-run."""
    section, _, field = key.partition(".")
    if section not in SECTIONS or not field:
        raise ConfigError(f"unknown config key {key!r} "
                          f"(sections: {', '.join(SECTIONS)})")
    obj = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(obj)}
    if field not in names:
        raise ConfigError(f"unknown config key {key!r} "
                          f"({section} fields: {', '.join(sorted(names))})")
    try:
        parsed = _parse_value(value, getattr(obj, field))
        setattr(cfg, section, dataclasses.replace(obj, **{field: parsed}))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file's keys in order, then explicit overrides."""
    cfg = RunConfig()
    lines = []
    if path is not None:
        try:
            with open(path) as f:
                lines = f.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        apply_override(cfg, key.strip(), value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        apply_override(cfg, key.strip(), value)
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Canonical dotted-key rendering (stable field order) of a config."""
    out = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{section}.{f.name}={v}")
    return "\n".join(out) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:16]


def synth_shifts(n_sources: int = 3) -> list:
    """Appearance shifts for the synthetic benchmark: the first
    ``n_sources`` entries are mildly distinct source domains, the last
    entry is the markedly shifted target domain."""
    base = [
        DomainShift(),
        DomainShift(hue=0.35, brightness=1.15),
        DomainShift(hue=-0.30, brightness=0.85, blur_radius=0.5),
        DomainShift(hue=0.20, brightness=1.05, noise_sigma=0.02),
        DomainShift(hue=-0.15, brightness=0.95, blur_radius=0.3),
    ]
    if not 1 <= n_sources <= len(base):
        raise ConfigError(f"n_sources must be in [1, {len(base)}]")
    target = DomainShift(hue=0.9, brightness=0.65, noise_sigma=0.05,
                         blur_radius=1.0, warp_amplitude=1.5)
    return base[:n_sources] + [target]


def desk_scale_config() -> RunConfig:
    """The small reference configuration used by the synthetic benchmark."""
    cfg = RunConfig()
    cfg.encoder = EncoderConfig(channels=(8, 16, 24, 32))
    cfg.decoder = DecoderConfig(patch=2, ratios=(2, 4), embed=32, num_classes=5)
    cfg.training = HyperParams(crop=(64, 64), iterations=300,
                               confidence_threshold=0.9)
    cfg.augment = AugmentationConfig(resize_range=(0.75, 1.25), blur_prob=0.2,
                                     crop=(64, 64))
    return cfg
