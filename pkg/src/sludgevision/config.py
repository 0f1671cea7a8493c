"""Run configuration: an INI file with sections data, augment, model, train, eval, monitor.

Example::

    [data]
    resolution = 512, 384
    channel_means = 0.485, 0.456, 0.406

    [augment]
    rotation_degrees = -180, 180
    erase_probability = 0.5

    [train]
    epochs = 30
    initial_lr = 1e-4

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentPolicy
from .data_ingest import DEFAULT_RESOLUTION, NormalizationStats
from .errors import ValidationError
from .trainer import TrainConfig


@dataclass
class ModelOptions:
    stochastic_depth_rate: float | None = None
    weights_dir: str | None = None
    init_weights: str | None = None


@dataclass
class EvalOptions:
    k: int = 10
    seed: int = 0
    per_image: bool = False


@dataclass
class MonitorOptions:
    threshold: float = 150.0
    persistence: int = 2
    trend_window: int = 4
    trend_slope_min: float = 5.0


@dataclass
class RunConfig:
    resolution: tuple[int, int] = DEFAULT_RESOLUTION
    normalization: NormalizationStats = field(default_factory=NormalizationStats)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    model: ModelOptions = field(default_factory=ModelOptions)
    train: dict = field(default_factory=dict)  # TrainConfig overrides; mode is set per command
    eval: EvalOptions = field(default_factory=EvalOptions)
    monitor: MonitorOptions = field(default_factory=MonitorOptions)

    def train_config(self, mode: str) -> TrainConfig:
        return TrainConfig(mode=mode, **self.train)


def _parse_value(raw: str, annotation):
    text = raw.strip()
    if text.lower() in ("none", ""):
        return None
    ann = str(annotation)
    if "tuple" in ann:
        return tuple(_scalar(p.strip()) for p in text.split(","))
    if "bool" in ann:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if ann.startswith("int") or ann == "<class 'int'>":
        return int(text)
    if "float" in ann:
        return float(text)
    return text


def _scalar(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _section(parser, name: str, cls) -> dict:
    if not parser.has_section(name):
        return {}
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in parser.items(name):
        if key not in fields:
            raise ValidationError(f"[{name}] unknown key {key!r}")
        try:
            out[key] = _parse_value(raw, fields[key])
        except ValueError as exc:
            raise ValidationError(f"[{name}] {key}: {exc}") from None
    return out


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(Path(path), encoding="utf-8"):
        raise ValidationError(f"cannot read config file {path}")
    extra = set(parser.sections()) - {"data", "augment", "model", "train", "eval", "monitor"}
    if extra:
        raise ValidationError(f"unknown config sections: {sorted(extra)}")

    if parser.has_section("data"):
        data = dict(parser.items("data"))
        unknown = set(data) - {"resolution", "channel_means", "channel_stds"}
        if unknown:
            raise ValidationError(f"[data] unknown keys {sorted(unknown)}")
        try:
            if "resolution" in data:
                cfg.resolution = tuple(int(v) for v in data["resolution"].split(","))
            means = tuple(float(v) for v in data["channel_means"].split(",")) if "channel_means" in data else None
            stds = tuple(float(v) for v in data["channel_stds"].split(",")) if "channel_stds" in data else None
        except ValueError as exc:
            raise ValidationError(f"[data] {exc}") from None
        cfg.normalization = NormalizationStats(means or cfg.normalization.channel_means,
                                               stds or cfg.normalization.channel_stds)

    cfg.augment = AugmentPolicy(**_section(parser, "augment", AugmentPolicy))
    cfg.model = ModelOptions(**_section(parser, "model", ModelOptions))
    train = _section(parser, "train", TrainConfig)
    train.pop("mode", None)
    cfg.train = {k: v for k, v in train.items() if v is not None or k in ("epochs", "layerwise_lr_decay")}
    TrainConfig(**cfg.train)  # validate early
    cfg.eval = EvalOptions(**_section(parser, "eval", EvalOptions))
    cfg.monitor = MonitorOptions(**_section(parser, "monitor", MonitorOptions))
    return cfg
