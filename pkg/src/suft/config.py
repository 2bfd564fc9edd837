"""Flat ``key = value`` run configuration with [network], [train], [data] and [paths] sections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .network import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


PRESETS = {
    "standard": {"train": {"lr0": 1e-4, "decay_factor": 0.1, "decay_period": 100}},
    "real_world": {
        "train": {"lr0": 6e-5, "decay_factor": 0.5, "decay_period": 70},
        "network": {"scale": 2},
        "data": {"degradation": "provided_lr"},
    },
}

DATA_KEYS = {"degradation": "synthetic_bicubic", "train_manifest": "", "test_manifest": "", "preset": "standard"}
PATH_KEYS = {"checkpoint": "", "out_dir": "runs"}


def _defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)}


SCHEMA = {
    "network": _defaults(NetworkConfig),
    "train": _defaults(TrainConfig),
    "data": DATA_KEYS,
    "paths": PATH_KEYS,
}


def coerce(value: str, like, where: str):
    try:
        if isinstance(like, bool):
            lowered = value.lower()
            if lowered in ("true", "on", "yes", "1"):
                return True
            if lowered in ("false", "off", "no", "0"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {type(like).__name__}") from None
    return value


def _locate(key: str, where: str) -> tuple[str, str]:
    if "." in key:
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r}")
        return section, name
    owners = [s for s, keys in SCHEMA.items() if key in keys]
    if not owners:
        raise ConfigError(f"{where}: unknown key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"{where}: key {key!r} is ambiguous, qualify it as one of "
                          + ", ".join(f"{s}.{key}" for s in owners))
    return owners[0], key


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    degradation: str = "synthetic_bicubic"
    train_manifest: str = ""
    test_manifest: str = ""
    checkpoint: str = ""
    out_dir: str = "runs"
    preset: str = "standard"
    epochs_given: bool = False


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, object]]:
    values: dict[str, dict[str, object]] = {s: {} for s in SCHEMA}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = key.strip(), value.strip()
        if section is None:
            sec, name = _locate(key, where)
        else:
            sec, name = section, key
            if name not in SCHEMA[sec]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{sec}]")
        values[sec][name] = coerce(value, SCHEMA[sec][name], where)
    return values


def build_run_config(values: dict[str, dict[str, object]], overrides=(), seed=None) -> RunConfig:
    values = {s: dict(v) for s, v in values.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key=value")
        sec, name = _locate(key.strip(), f"--set {item}")
        values[sec][name] = coerce(value.strip(), SCHEMA[sec][name], f"--set {item}")
    if seed is not None:
        values["train"]["seed"] = seed
        values["network"]["seed"] = seed

    preset = values["data"].get("preset", "standard")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    for sec, defaults in PRESETS[preset].items():
        for k, v in defaults.items():
            values[sec].setdefault(k, v)

    data = {**DATA_KEYS, **values["data"]}
    if data["degradation"] not in ("synthetic_bicubic", "provided_lr"):
        raise ConfigError(f"unknown degradation mode {data['degradation']!r}")
    paths = {**PATH_KEYS, **values["paths"]}
    try:
        network = NetworkConfig(**values["network"])
        train = TrainConfig(**values["train"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        network=network,
        train=train,
        degradation=data["degradation"],
        train_manifest=data["train_manifest"],
        test_manifest=data["test_manifest"],
        checkpoint=paths["checkpoint"],
        out_dir=paths["out_dir"],
        preset=preset,
        epochs_given="epochs" in values["train"],
    )


def load_run_config(path=None, overrides=(), seed=None) -> RunConfig:
    values: dict[str, dict[str, object]] = {s: {} for s in SCHEMA}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(), str(path))
        base = path.parent
        for key in ("train_manifest", "test_manifest"):
            v = values["data"].get(key)
            if v and not Path(v).is_absolute():
                values["data"][key] = str(base / v)
    return build_run_config(values, overrides, seed)
