"""Experiment configuration: nested dataclasses loaded from one JSON document.

Unknown keys are rejected. Environment variables ``MOME_<PATH>`` override
individual fields, where ``<PATH>`` is the dotted config path upper-cased
with dots replaced by underscores (``MOME_TRAIN_BATCH_SIZE`` ->
``train.batch_size``, ``MOME_MODEL_ADT_LAYERS`` -> ``model.adt.layers``).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, get_type_hints

from .errors import ConfigError
from .move import AdtConfig


def desk_adt() -> AdtConfig:
    return AdtConfig(pool_h=3, pool_w=3, layers=2, heads=4, points=2, width=32)


@dataclass
class ModelConfig:
    adt: AdtConfig = field(default_factory=desk_adt)
    transform: str = "adt"  # "adt" | "avgpool"
    aggregation: str = "router"  # "router" | "addition"
    single_expert: int | None = None
    router_hidden: int | None = None  # default 4 * d_instruction
    value_bias: bool = True
    importance_mode: str = "frobenius"  # "frobenius" | "token_mean"
    lm_layers: int = 2
    lm_heads: int = 4
    adapter_rank: int = 8
    mole_experts: int = 4
    mole_variant: str = "I"  # "T" | "I" | "IT"
    mole_balance: str = "none"  # "none" | "GS" | "LB"
    gumbel_temperature: float = 1.0
    it_gate: str = "token"  # "token" | "instance"


@dataclass
class DataConfig:
    groups: int = 4
    tasks_per_group: int = 2
    d_instruction: int = 16
    content_dim: int = 4
    style_dim: int = 3
    informative: list[int] = field(default_factory=lambda: [0, 1, 0, 2])
    style_shift: float = 1.5
    pixel_noise: float = 0.3
    label_noise: float = 0.05
    eval_size: int = 256


@dataclass
class TrainSection:
    steps: int = 1500
    stage2_steps: int = 500
    batch_size: int = 32
    lr: float = 3e-3
    stage2_lr: float = 3e-3
    warmup: int = 100
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    eps: float = 1e-8
    lb_coef: float = 0.1
    train_host: bool = False  # stage 2: also train host LM and ADTs
    shards: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self) -> None:
        errors: list[str] = []
        m, d, t = self.model, self.data, self.train
        try:
            m.adt.validate()
        except ConfigError as exc:
            errors += [f"model.adt.{f}" for f in exc.fields] or ["model.adt"]
        checks = [
            (m.transform in ("adt", "avgpool"), "model.transform"),
            (m.aggregation in ("router", "addition"), "model.aggregation"),
            (m.importance_mode in ("frobenius", "token_mean"), "model.importance_mode"),
            (m.mole_variant in ("T", "I", "IT"), "model.mole_variant"),
            (m.mole_balance in ("none", "GS", "LB"), "model.mole_balance"),
            (m.it_gate in ("token", "instance"), "model.it_gate"),
            (m.gumbel_temperature > 0, "model.gumbel_temperature"),
            (m.mole_experts >= 1, "model.mole_experts"),
            (m.adapter_rank >= 1, "model.adapter_rank"),
            (m.lm_layers >= 1, "model.lm_layers"),
            (m.adt.width % m.lm_heads == 0, "model.lm_heads"),
            (m.single_expert is None or 0 <= m.single_expert < 3, "model.single_expert"),
            (1 <= d.groups <= 4, "data.groups"),
            (d.tasks_per_group >= 1, "data.tasks_per_group"),
            (len(d.informative) >= d.groups and all(0 <= e < 3 for e in d.informative), "data.informative"),
            (d.eval_size >= d.groups, "data.eval_size"),
            (t.steps >= 0, "train.steps"),
            (t.stage2_steps >= 0, "train.stage2_steps"),
            (t.batch_size >= d.groups, "train.batch_size"),
            (t.lr > 0 and t.stage2_lr > 0, "train.lr"),
            (0 <= t.warmup and (t.steps == 0 or t.warmup <= t.steps), "train.warmup"),
            (t.shards >= 1 and t.shards <= t.batch_size, "train.shards"),
        ]
        errors += [name for ok, name in checks if not ok]
        if errors:
            raise ConfigError("invalid config fields: " + ", ".join(errors), errors)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, data: Mapping[str, Any], path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or 'config'} must be an object", [path or "config"])
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        fields = [f"{path}.{k}" if path else k for k in unknown]
        raise ConfigError("unknown config keys: " + ", ".join(fields), fields)
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = _coerce(value, hint, sub)
    return cls(**kwargs)


def _coerce(value, hint, path: str):
    text = str(hint)
    if value is None:
        if "None" in text:
            return None
        raise ConfigError(f"{path} may not be null", [path])
    try:
        if hint is bool or text == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if hint is int or text.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if hint is float or text == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if hint is str or text == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if text.startswith("list"):
            if not isinstance(value, list):
                raise TypeError
            return [int(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: cannot use {value!r} as {text}", [path]) from None
    return value


def from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def _field_paths(cls, prefix: str = "") -> dict[str, tuple[str, ...]]:
    out = {}
    hints = get_type_hints(cls)
    for f in dataclasses.fields(cls):
        parts = prefix + (("_" if prefix else "") + f.name)
        if dataclasses.is_dataclass(hints[f.name]):
            for k, v in _field_paths(hints[f.name], parts).items():
                out[k] = (f.name,) + v
        else:
            out[parts.upper()] = (f.name,)
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Nested override dict from ``MOME_*`` variables; values parsed as JSON when possible."""
    environ = os.environ if environ is None else environ
    paths = _field_paths(ExperimentConfig)
    nested: dict[str, Any] = {}
    for key, raw in environ.items():
        if not key.startswith("MOME_"):
            continue
        name = key[len("MOME_"):]
        if name not in paths:
            raise ConfigError(f"environment override {key} matches no config field", [key])
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = nested
        *head, leaf = paths[name]
        for part in head:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def merge(base: dict[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load(path: str | Path, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}", ["config"])
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}", ["config"]) from None
    return from_dict(merge(data, env_overrides(environ)))
