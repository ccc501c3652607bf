"""Flat ``key = value`` run configuration with dotted section prefixes.

Sections: ``model.*`` (preset or explicit architecture fields and component
toggles), ``optim.*`` (optimizer and schedule), ``train.*`` (loop control),
``data.*`` (dataset spec), ``out.*`` (artifact directory).  Lines starting
with ``#`` are comments.  Unknown keys are errors.  Serialization is
canonical, so parse(serialize(cfg)) reproduces cfg exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigurationError
from .model import ModelConfig, preset_config


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 50
    schedule: str = "cosine"


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    label_smoothing: float = 0.1
    early_stop_acc: float | None = None
    acc_check_every: int = 50


@dataclass
class DataConfig:
    kind: str = "shapes8"
    train_n: int = 800
    eval_n: int = 200
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"


_INT_TUPLE_FIELDS = {"stage_depths", "stage_widths", "offset_kernels"}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "int_tuple":
            return tuple(int(x) for x in raw.split(","))
        if kind == "opt_float":
            return None if raw == "" else float(raw)
    except ValueError:
        pass
    raise ConfigurationError(f"bad value for {key}: {raw!r}")


def _section_schema(obj) -> dict[str, object]:
    schema = {}
    for f in fields(obj):
        if f.name in _INT_TUPLE_FIELDS:
            schema[f.name] = "int_tuple"
        elif f.name == "early_stop_acc":
            schema[f.name] = "opt_float"
        else:
            schema[f.name] = type(getattr(obj, f.name))
    return schema


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; every field is written explicitly."""
    lines = []
    for section, obj in (("model", cfg.model), ("optim", cfg.optim),
                         ("train", cfg.train), ("data", cfg.data)):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                continue
            lines.append(f"{section}.{f.name} = {_format_value(v)}")
    lines.append(f"out.dir = {cfg.out_dir}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in entries:
            raise ConfigurationError(f"line {lineno}: duplicate key {key}")
        entries[key] = raw.strip()

    # preset expands first; explicit model.* keys then override its fields
    model = ModelConfig()
    if "model.preset" in entries:
        model = preset_config(entries.pop("model.preset"))

    sections = {"model": model, "optim": OptimConfig(),
                "train": TrainConfig(), "data": DataConfig()}
    out_dir = RunConfig().out_dir
    model_overrides = {}
    for key, raw in entries.items():
        if key == "out.dir":
            out_dir = raw
            continue
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigurationError(f"unknown config key: {key}")
        obj = sections[section]
        schema = _section_schema(obj)
        if name not in schema:
            raise ConfigurationError(f"unknown config key: {key}")
        value = _parse_value(raw, schema[name], key)
        if section == "model":
            model_overrides[name] = value
        else:
            setattr(obj, name, value)
    if model_overrides:
        sections["model"] = replace(model, **model_overrides)
    return RunConfig(model=sections["model"], optim=sections["optim"],
                     train=sections["train"], data=sections["data"],
                     out_dir=out_dir)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
