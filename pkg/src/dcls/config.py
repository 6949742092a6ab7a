"""Run configuration: INI-style sections of ``key = value`` pairs.

Every key has a default, unknown sections or keys are rejected, and
:meth:`RunConfig.to_ini` writes a canonical form that parses back to an equal
config. Command-line overrides use ``section.key=value``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .estimator import DEFAULT_LAYERS
from .exceptions import ConfigError

# keys that only say where outputs go; they do not change any result
LOCATION_KEYS = ("run.out",)


@dataclass
class ModelConfig:
    layers: str = DEFAULT_LAYERS
    kind: str = "gauss"
    kernel_count: int = 6
    dilated_kernel_size: int = 23
    sync_positions: bool = False
    dtype: str = "float32"


@dataclass
class OptimConfig:
    optimizer: str = "adamw"
    lr: float = 0.005
    weight_decay: float = 0.0
    lr_scale_positions: float = 5.0
    epochs: int = 15
    batch_size: int = 16


@dataclass
class DataConfig:
    source: str = "synth"
    n: int = 2000
    size: int = 32
    classes: int = 4
    noise: float = 0.25
    dot_radius: float = 4.0
    data_seed: int = 0
    images_path: str = ""
    labels_path: str = ""
    csv_path: str = ""
    height: int = 28
    width: int = 28
    csv_scale: float = 1.0
    val_fraction: float = 0.1
    normalize: str = "image"


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1
    out: str = "runs/default"
    seeds: str = "0,1,2"
    kinds: str = "bilinear,triangle,gauss"


@dataclass
class GradcheckConfig:
    kinds: str = "triangle,gauss"
    kernel_configs: int = 54
    layer_configs: int = 10
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    # -- mutation ------------------------------------------------------------

    def set(self, dotted: str, value: str) -> None:
        try:
            section, key = dotted.strip().split(".", 1)
        except ValueError:
            raise ConfigError(f"override {dotted!r} must look like section.key") from None
        sec = self._section(section)
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(sec, key, _coerce(types[key], value.strip(), f"{section}.{key}"))

    def apply_overrides(self, items) -> RunConfig:
        for item in items or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            k, v = item.split("=", 1)
            self.set(k, v)
        return self

    def _section(self, name):
        if name not in {f.name for f in fields(self)}:
            raise ConfigError(f"unknown section [{name}]")
        return getattr(self, name)

    # -- serialization ---------------------------------------------------------

    def to_ini(self, exclude=()) -> str:
        lines = []
        for sec_field in fields(self):
            sec = getattr(self, sec_field.name)
            lines.append(f"[{sec_field.name}]")
            for f in fields(sec):
                if f"{sec_field.name}.{f.name}" in exclude:
                    continue
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> RunConfig:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            cfg._section(section)
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def canonical(self) -> str:
        """INI text without location-only keys; what the hash and checkpoints record."""
        return self.to_ini(exclude=LOCATION_KEYS)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def copy(self) -> RunConfig:
        return dataclasses.replace(
            self,
            **{f.name: dataclasses.replace(getattr(self, f.name)) for f in fields(self)},
        )


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(typ, raw: str, where: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {typ}") from None


def parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def parse_str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]
