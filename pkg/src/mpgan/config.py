"""Run configuration: INI-style files with full command-line override.

A config file holds flat key = value pairs under three sections, mapping
onto the dataclasses that drive the pipeline:

    [dataset]   -> datagen.DatasetSpec   (azimuth_* keys form the azimuth spec)
    [train]     -> train.TrainConfig
    [joint]     -> joint.JointConfig     (everything but its embedded train config)

Unknown sections or keys are rejected. Every value can be overridden on the
command line with ``--set section.key=value``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .datagen import DatasetSpec
from .errors import ConfigError
from .joint import JointConfig
from .train import TrainConfig

_AZIMUTH_KEYS = ("azimuth_kind", "azimuth_weights", "azimuth_bins", "azimuth_kappa")


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    joint: JointConfig = field(default_factory=JointConfig)

    def validate(self) -> "RunConfig":
        self.dataset.validate()
        self.train.validate()
        self.joint.train = self.train
        self.joint.validate()
        return self


def _parse_value(raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {target_type.__name__}") from exc


def _field_types(cls) -> dict:
    return {f.name: f.type for f in dataclasses.fields(cls)}


_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}


def _assign(obj, key: str, raw: str, section: str):
    types = _field_types(type(obj))
    if key not in types:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    t = types[key]
    t = _TYPE_NAMES.get(t, t) if isinstance(t, str) else t
    if t not in (int, float, bool, str):
        raise ConfigError(f"key {key!r} in [{section}] cannot be set from text")
    setattr(obj, key, _parse_value(raw, t))


def _parse_float_list(raw: str) -> list[float]:
    return [float(tok) for tok in raw.replace(",", " ").split()]


def _apply_dataset_key(spec: DatasetSpec, key: str, raw: str):
    if key in _AZIMUTH_KEYS:
        if key == "azimuth_kind":
            spec.azimuth = {"kind": raw.strip()}
        elif key == "azimuth_weights":
            spec.azimuth["weights"] = _parse_float_list(raw)
        elif key == "azimuth_bins":
            spec.azimuth["bins"] = [int(v) for v in _parse_float_list(raw)]
        elif key == "azimuth_kappa":
            spec.azimuth["kappa"] = float(raw)
        return
    if key == "azimuth":
        raise ConfigError("set the azimuth spec through azimuth_kind/azimuth_weights/azimuth_bins/azimuth_kappa")
    _assign(spec, key, raw, "dataset")


def _apply_key(cfg: RunConfig, section: str, key: str, raw: str):
    if section == "dataset":
        _apply_dataset_key(cfg.dataset, key, raw)
    elif section == "train":
        _assign(cfg.train, key, raw, "train")
    elif section == "joint":
        if key == "train":
            raise ConfigError("the [joint] section embeds [train]; set keys there")
        _assign(cfg.joint, key, raw, "joint")
    else:
        raise ConfigError(f"unknown config section [{section}]")


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional INI file plus 'section.key=value'
    override strings; validates before returning."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        if parser.defaults():
            raise ConfigError("top-level keys are not allowed; use [dataset], [train] or [joint]")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply_key(cfg, section, key, raw)
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        _apply_key(cfg, section.strip(), key.strip().replace("-", "_"), raw)
    cfg.joint.train = cfg.train
    return cfg.validate()
