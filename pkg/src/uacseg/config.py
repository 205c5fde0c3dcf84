"""Experiment configuration: nested dataclasses, YAML loading, dot-path overrides, digests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentationConfig
from .classdrop import ClassDropConfig
from .data import DomainStyle, SceneSpec, SOURCE_STYLE, TARGET_STYLE
from .losses import RampSchedule
from .model import SegModelSpec
from .trainer import EmaConfig, MethodConfig, OptimConfig
from .uncertainty import ThresholdSchedule, UncertaintyConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str | None = None
    scene: SceneSpec = field(default_factory=SceneSpec)
    source_style: DomainStyle = SOURCE_STYLE
    target_style: DomainStyle = TARGET_STYLE
    counts: dict = field(default_factory=lambda: {"source": 200, "target_train": 200, "target_eval": 64})


@dataclass
class ModelSection:
    widths: tuple[int, int, int, int] = (12, 16, 24, 32)


@dataclass
class UncertaintySection:
    num_passes: int = 8
    noise_sigma: float = 0.05
    thresh_alpha: float = 0.75
    thresh_beta: float = -5.0
    z_sup_mode: str = "batch_max"
    enabled: bool = True


@dataclass
class ClassDropSection:
    min_ratio: float = 0.5
    max_ratio: float = 0.9
    fill_value: float | str = 0.0
    enabled: bool = True


@dataclass
class LossSection:
    lambda0: float = 10.0
    consistency_reduction: str = "mean_all"


@dataclass
class TrainSection:
    seed: int = 1
    t_max: int = 2000
    batch_size: int = 8
    eval_every: int = 100
    lr: float = 1e-3
    weight_decay: float = 5e-5
    ema_decay: float = 0.99
    source_augment: bool = False
    checkpoint_every: int = 0
    log_classdrop: bool = False


@dataclass
class ExperimentConfig:
    name: str = "run"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    uncertainty: UncertaintySection = field(default_factory=UncertaintySection)
    classdrop: ClassDropSection = field(default_factory=ClassDropSection)
    loss: LossSection = field(default_factory=LossSection)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self) -> "ExperimentConfig":
        try:
            self.method_config()
            self.model_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        t = self.train
        if t.t_max < 1 or t.batch_size < 1 or t.eval_every < 1:
            raise ConfigError("t_max, batch_size and eval_every must be >= 1")
        return self

    def model_spec(self) -> SegModelSpec:
        s = self.data.scene
        return SegModelSpec(s.num_classes, self.model.widths, s.height, s.width, init_seed=self.train.seed)

    def method_config(self) -> MethodConfig:
        u, c, t = self.uncertainty, self.classdrop, self.train
        return MethodConfig(
            uncertainty=UncertaintyConfig(u.num_passes, u.noise_sigma),
            threshold=ThresholdSchedule(u.thresh_alpha, u.thresh_beta, t.t_max, u.z_sup_mode),
            classdrop=ClassDropConfig(c.min_ratio, c.max_ratio, c.fill_value),
            ramp=RampSchedule(self.loss.lambda0, t.t_max),
            ema=EmaConfig(t.ema_decay),
            optim=OptimConfig(t.lr, t.weight_decay),
            augment=self.augment,
            use_uncertainty_mask=u.enabled,
            use_classdrop=c.enabled,
            consistency_reduction=self.loss.consistency_reduction,
            source_augment=t.source_augment,
            log_classdrop=t.log_classdrop,
        )

    @property
    def method_label(self) -> str:
        if self.loss.lambda0 == 0:
            return "source-only"
        u, c = self.uncertainty.enabled, self.classdrop.enabled
        return {
            (False, False): "mean-teacher",
            (True, False): "mean-teacher+uncertainty",
            (False, True): "mean-teacher+classdrop",
            (True, True): "full",
        }[(u, c)]

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def training_digest(self) -> str:
        """Digest ignoring fields that do not affect the trajectory (name, data root)."""
        d = self.to_dict()
        d.pop("name", None)
        d["data"].pop("root", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# Method presets used by the CLI and the ablation grid ("method" key).
METHOD_PRESETS = {
    "source_only": {"loss.lambda0": 0.0},
    "mean_teacher": {"uncertainty.enabled": False, "classdrop.enabled": False},
    "uncertainty": {"uncertainty.enabled": True, "classdrop.enabled": False},
    "classdrop": {"uncertainty.enabled": False, "classdrop.enabled": True},
    "full": {"uncertainty.enabled": True, "classdrop.enabled": True},
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data):
    """Instantiate dataclass ``cls`` from a (possibly partial) dict, recursively."""
    if not dataclasses.is_dataclass(cls):
        return data
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        sub = next((a for a in typing.get_args(hint) if dataclasses.is_dataclass(a)), hint)
        kwargs[name] = _build(sub, value) if dataclasses.is_dataclass(sub) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


def from_dict(d: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, d or {}).validate()


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key=value`` (or mapping) overrides with dot-path keys.

    The special key ``method`` expands to a preset from METHOD_PRESETS.
    """
    if isinstance(overrides, dict):
        items = list(overrides.items())
    else:
        items = []
        for o in overrides or []:
            if "=" not in o:
                raise ConfigError(f"override {o!r} is not key=value")
            k, v = o.split("=", 1)
            items.append((k.strip(), _parse_value(v)))
    d = cfg.to_dict()
    for key, value in items:
        if key == "method":
            if value not in METHOD_PRESETS:
                raise ConfigError(f"unknown method preset {value!r}; choose from {sorted(METHOD_PRESETS)}")
            for k2, v2 in METHOD_PRESETS[value].items():
                _set_path(d, k2, v2)
            continue
        _set_path(d, key, value)
    return from_dict(d)


def _set_path(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides=None) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = from_dict(d)
    return apply_overrides(cfg, overrides) if overrides else cfg


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
