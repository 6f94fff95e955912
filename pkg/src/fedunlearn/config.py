"""Experiment configuration: flat INI sections mapped onto frozen dataclasses.

Grammar: ``[section]`` headers, ``key = value`` lines, ``#`` or ``;``
comments. Lists are comma separated; an empty value means "unset" for
optional fields (``delta``, ``early_stop_acc``, ``speed_factors``).
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data_pipeline import AugmentSpec, TriggerSpec
from .errors import ConfigError
from .federation_sim import FederationConfig
from .tensor_nn import Conv, Dense, ModelSpec, ReLU
from .unlearning_core import UnlearnConfig

METHODS = ("retrain", "pga", "afu_ic")
AXES = ("gamma_calib", "mode", "alpha", "n_clients")


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 3
    per_class: int = 400
    test_fraction: float = 0.25
    noise: float = 0.2
    image_size: int = 16
    aux_size: int = 256

    def validate(self) -> None:
        if self.num_classes < 2 or self.per_class < 1:
            raise ConfigError("data.num_classes must be >= 2 and data.per_class >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
        if self.noise < 0 or self.image_size < 4 or self.aux_size < 1:
            raise ConfigError("data.noise >= 0, data.image_size >= 4, data.aux_size >= 1 required")


@dataclass(frozen=True)
class ModelConfig:
    """``conv``: strided 3x3 conv blocks then a two-layer head.
    ``dense``: ReLU MLP with ``hidden`` widths."""

    kind: str = "conv"
    channels: tuple[int, ...] = (8, 16, 16, 16)
    stride: int = 2
    head: int = 32
    hidden: tuple[int, ...] = (256, 64)

    def validate(self) -> None:
        if self.kind not in ("conv", "dense"):
            raise ConfigError("model.kind must be 'conv' or 'dense'")
        if min(self.channels + self.hidden + (self.head, self.stride), default=1) < 1:
            raise ConfigError("model widths and stride must be positive")

    def build(self, data: DataConfig) -> ModelSpec:
        shape = (1, data.image_size, data.image_size)
        k = data.num_classes
        layers: list = []
        if self.kind == "conv":
            for ch in self.channels:
                layers += [Conv(ch, 3, self.stride), ReLU()]
            layers += [Dense(self.head), ReLU(), Dense(k)]
        else:
            for h in self.hidden:
                layers += [Dense(h), ReLU()]
            layers.append(Dense(k))
        return ModelSpec(shape, tuple(layers), k)


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    methods: tuple[str, ...] = METHODS
    output_dir: str = "out"
    target: int = 0
    workers: int = 1

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("run.seeds must not be empty")
        if not self.methods:
            raise ConfigError("run.methods must not be empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"run.methods: unknown method(s) {bad}; choose from {list(METHODS)}")
        if self.target < 0:
            raise ConfigError("run.target must be a client id")
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")


@dataclass(frozen=True)
class AblationConfig:
    axis: str = "gamma_calib"
    values: tuple[str, ...] = ("0", "1", "5")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    run: RunConfig = field(default_factory=RunConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        self.model.validate()
        self.federation.validate()
        self.unlearn.validate()
        shape = (1, self.data.image_size, self.data.image_size)
        self.trigger.validate(shape, self.data.num_classes)
        self.augment.validate(shape)
        self.run.validate()
        if self.run.target >= self.federation.n_clients:
            raise ConfigError(f"run.target {self.run.target} is not one of {self.federation.n_clients} clients")
        self.model.build(self.data)
        return self

    @property
    def spec(self) -> ModelSpec:
        return self.model.build(self.data)


SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def _section_type(name: str) -> type:
    return typing.get_type_hints(ExperimentConfig)[name]


def _field_types(cls: type) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _parse_value(raw: str, tp, where: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if raw == "" or raw.lower() == "none":
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _parse_value(raw, inner, where)
    if origin is tuple:
        inner = args[0]
        if raw == "":
            return ()
        return tuple(_parse_value(p, inner, where) for p in raw.split(","))
    try:
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return None


def _at(text: str, section: str, key: str | None = None) -> str:
    line = _line_of(text, section, key)
    name = f"{section}.{key}" if key else f"[{section}]"
    return f"line {line}: {name}" if line else name


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"parse error: {e}") from None
    cfg = base or ExperimentConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{_at(text, section)}: unknown section; expected one of {sorted(SECTIONS)}")
        cls = _section_type(section)
        types_ = _field_types(cls)
        updates = {}
        for key, raw in cp.items(section):
            if key not in types_:
                raise ConfigError(f"{_at(text, section, key)}: unknown key; expected one of {sorted(types_)}")
            updates[key] = _parse_value(raw, types_[key], _at(text, section, key))
        try:
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **updates)})
        except ConfigError as e:
            raise ConfigError(f"[{section}]: {e}") from None
    _validate_with_context(cfg, text)
    return cfg


def _validate_with_context(cfg: ExperimentConfig, text: str = "") -> None:
    try:
        cfg.validate()
    except ConfigError as e:
        msg = str(e)
        # name the offending section.key when the message mentions a field
        for section in SECTIONS:
            for key in _field_types(_section_type(section)):
                if re.search(rf"\b{key}\b", msg):
                    raise ConfigError(f"{_at(text, section, key)}: {msg}") from None
        raise


def parse_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def to_ini(cfg: ExperimentConfig) -> str:
    out = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        for f in fields(obj):
            out.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def with_overrides(cfg: ExperimentConfig, section: str, **kw) -> ExperimentConfig:
    return replace(cfg, **{section: replace(getattr(cfg, section), **kw)})


def set_axis(cfg: ExperimentConfig, axis: str, raw: str) -> ExperimentConfig:
    """Apply one ablation value given as text."""
    if axis == "gamma_calib":
        v = _parse_value(raw, float, "ablation.values")
        if v < 0:
            raise ConfigError(f"ablation.values: gamma_calib must be >= 0, got {raw}")
        return with_overrides(cfg, "unlearn", gamma_calib=v)
    if axis == "mode":
        if raw.strip() not in ("sync", "async"):
            raise ConfigError(f"ablation.values: mode must be sync or async, got {raw}")
        return with_overrides(cfg, "federation", mode=raw.strip())
    if axis == "alpha":
        v = _parse_value(raw, float, "ablation.values")
        if not v > 0:
            raise ConfigError(f"ablation.values: alpha must be > 0, got {raw}")
        return with_overrides(cfg, "federation", alpha=v)
    if axis == "n_clients":
        v = _parse_value(raw, int, "ablation.values")
        if v < 2:
            raise ConfigError(f"ablation.values: n_clients must be >= 2, got {raw}")
        sf = cfg.federation.speed_factors
        if sf is not None and len(sf) != v:
            sf = tuple(sf[i] if i < len(sf) else 1.0 for i in range(v))
        return with_overrides(cfg, "federation", n_clients=v, speed_factors=sf)
    raise ConfigError(f"ablation.axis must be one of {list(AXES)}, got {axis!r}")
