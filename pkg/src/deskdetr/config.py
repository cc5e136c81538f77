"""Run configuration: defaults < preset < config file < command-line overrides.

A run is described by four sections, ``model``, ``train``, ``loss`` and
``cost``. Overrides use dotted paths such as ``train.lr=2e-4`` or
``model.decoder.num_layers=6``; any unknown key is rejected.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .errors import ConfigError, StorageError
from .losses import LossWeights
from .matching import CostWeights
from .model import ModelConfig
from .train import TrainConfig

SECTIONS = ("model", "train", "loss", "cost")

# Recipe used for the from-scratch 96x96 toy runs. The backbone has no
# pretraining, so it trains at the base rate with live batch statistics,
# and the schedule is compressed to fit a two-hour single-CPU budget.
PRESETS: dict[str, dict] = {
    "standard": {},
    "toy": {
        "train": {
            "lr": 2e-4,
            "backbone_lr": 2e-4,
            "warmup_steps": 100,
            "ema_decay": 0.999,
            "ema_ramp": 200.0,
            "freeze_backbone_bn": False,
            "steps": 5000,
            "lr_drop_step": 4000,
            "eval_every": 1000,
        },
        "model": {"decoder": {"dn_number": 64}},
    },
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    cost: CostWeights = field(default_factory=CostWeights)

    def to_dict(self) -> dict:
        return {name: _as_dict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            loss=_build(LossWeights, d.get("loss", {})),
            cost=_build(CostWeights, d.get("cost", {})),
        )


def _as_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = _as_dict(v) if is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def _build(typ, d: dict):
    known = {f.name for f in fields(typ)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    try:
        return typ(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def deep_merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge; keys of ``update`` must already exist in ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} expects a mapping")
            out[key] = deep_merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_value(text: str):
    """Typed value of an override: JSON/YAML scalars and lists, with float fallback for forms like ``1e-4``."""
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from exc
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def override_dict(assignments: list[str]) -> dict:
    """``["train.lr=2e-4", ...]`` -> nested dict."""
    out: dict = {}
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"conflicting overrides for {key!r}")
        node[parts[-1]] = parse_value(raw.strip())
    return out


def read_config_file(path: str | os.PathLike) -> dict:
    """YAML or JSON mapping from ``path``."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if os.fspath(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return data


def _coerce_numbers(d: dict) -> dict:
    """YAML 1.1 reads ``1e-4`` as a string; turn such strings back into floats."""
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out[k] = _coerce_numbers(v)
        elif isinstance(v, str):
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
        else:
            out[k] = v
    return out


def resolve(preset: str | None = None, path: str | os.PathLike | None = None,
            overrides: dict | None = None) -> RunConfig:
    """Effective configuration from the layered sources."""
    merged = RunConfig().to_dict()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        merged = deep_merge(merged, PRESETS[preset])
    if path is not None:
        merged = deep_merge(merged, _coerce_numbers(read_config_file(path)))
    if overrides:
        merged = deep_merge(merged, overrides)
    return RunConfig.from_dict(merged)


def write_config(cfg: RunConfig, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Echo the effective configuration as YAML next to a command's outputs."""
    data = cfg.to_dict()
    if extra:
        data = {**data, **extra}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(data, fh, sort_keys=True)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
