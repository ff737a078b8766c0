"""Run configuration: one YAML file with dotted-key overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, PolypSegError
from .preprocess import TARGET_SIDE, AugmentPolicy
from .trainer import TrainConfig
from .unet import UNetConfig

OUT_ENV = "POLYPSEG_OUT"


@dataclass
class DatasetSection:
    root: str = "data/kvasir-seg"


@dataclass
class SplitSection:
    seed: int = 42


@dataclass
class PreprocessSection:
    side: int = TARGET_SIDE


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    model: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            d[f.name] = {k: _plain(v) for k, v in _own_fields(section).items()}
        d["train"].pop("augment", None)
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    @property
    def dataset_root(self) -> Path:
        return Path(self.dataset.root)


def _own_fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


SECTION_TYPES = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _build_section(name: str, values: dict, augment: AugmentPolicy | None = None):
    cls = SECTION_TYPES[name]
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    if name == "train":
        allowed.pop("augment")
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        default = allowed[k].default
        if isinstance(default, tuple) or k in ("encoder_widths", "scale_range"):
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{name}.{k} must be a list, got {v!r}")
            v = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{name}.{k} must be a boolean, got {v!r}")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name}.{k} must be an integer, got {v!r}")
        elif isinstance(default, float):
            if isinstance(v, str):
                # YAML 1.1 reads "1e-4" as a string
                try:
                    v = float(v)
                except ValueError:
                    pass
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{k} must be a number, got {v!r}")
            v = float(v)
        elif isinstance(default, str) and not isinstance(v, str):
            v = str(v)
        kwargs[k] = v
    if name == "train":
        kwargs["augment"] = augment or AugmentPolicy()
    try:
        return cls(**kwargs)
    except PolypSegError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] invalid values: {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for k, v in raw.items():
        if v is not None and not isinstance(v, dict):
            raise ConfigError(f"section [{k}] must be a mapping")
    sections = {}
    sections["augment"] = _build_section("augment", raw.get("augment") or {})
    for name in SECTION_TYPES:
        if name != "augment":
            sections[name] = _build_section(name, raw.get(name) or {}, sections["augment"])
    return RunConfig(**sections)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    raw = json.loads(json.dumps(raw or {}))
    for item in overrides or ():
        key, sep, value = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) != 2 or not all(parts):
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        try:
            parsed = yaml.safe_load(value) if value.strip() else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value in {item!r}: {exc}") from exc
        if raw.get(parts[0]) is None:
            raw[parts[0]] = {}
        section = raw[parts[0]]
        if not isinstance(section, dict):
            raise ConfigError(f"section [{parts[0]}] must be a mapping")
        section[parts[1]] = parsed
    return raw


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Read a YAML config (optional), apply ``--set`` overrides and the output-dir env var."""
    env = os.environ if env is None else env
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    if env.get(OUT_ENV):
        raw.setdefault("output", {})["dir"] = env[OUT_ENV]
    return from_dict(raw)
