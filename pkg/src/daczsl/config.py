"""Experiment configuration: flat key=value files with section headers.

The format is deliberately dependency-free and diff-friendly:

    # comment
    [data]
    mode = U_DACZSL
    num_classes = 12

Every key maps one-to-one onto a dataclass field; unknown keys and type
errors are reported with their line number.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields

from .data import SplitConfig
from .losses import LossWeights
from .model import ModelConfig
from .optim import ConfigError
from .trainer import AblationFlags, TrainConfig

ENV_OUT_DIR = "DIN_OUT_DIR"

REQUIRED_FIELDS = (("data", "mode"), ("data", "num_classes"),
                   ("data", "num_domains"), ("run", "seeds"))

# [model] keys the runner derives from the data section instead.
_MODEL_DERIVED = {"feature_dim", "semantic_dim", "dim_per_token", "num_classes",
                  "num_domains", "num_tasks", "prompt_init", "prompt_placement",
                  "with_local", "with_domain_disc", "with_task_disc", "seed"}
_TRAIN_EXCLUDED: set[str] = set()
_DATA_EXCLUDED: set[str] = set()


@dataclass
class RunSettings:
    seeds: list[int] = field(default_factory=list)
    out_dir: str = ""
    eval_pool: str = "all"
    global_only_eval: bool = False
    train_preset: str = "desk"
    k_sweep: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16])


@dataclass
class ExperimentConfig:
    data: SplitConfig
    model: ModelConfig
    train: TrainConfig
    loss: LossWeights
    flags: AblationFlags
    run: RunSettings

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        self.loss.validate()
        if not self.run.seeds:
            raise ConfigError("missing required field run.seeds")
        if not self.run.out_dir:
            raise ConfigError(
                f"no output directory: set run.out_dir, --out, or ${ENV_OUT_DIR}")
        if self.run.eval_pool not in ("all", "revealed"):
            raise ConfigError("run.eval_pool must be 'all' or 'revealed'")


class ConfigFileError(ConfigError):
    """Config file failed to parse or validate; message carries the location."""


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


_SECTIONS: dict[str, tuple] = {
    "data": (SplitConfig, _DATA_EXCLUDED),
    "model": (ModelConfig, _MODEL_DERIVED),
    "train": (TrainConfig, _TRAIN_EXCLUDED),
    "loss": (LossWeights, set()),
    "ablation": (AblationFlags, set()),
    "run": (RunSettings, set()),
}


def _convert(value: str, annotation, where: str):
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value.strip().lower() in ("none", ""):
            return None
        return _convert(value, args[0], where)
    if annotation is bool:
        lowered = value.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigFileError(f"{where}: expected a boolean, got {value!r}")
    if annotation is int:
        try:
            return int(value)
        except ValueError:
            raise ConfigFileError(f"{where}: expected an integer, got {value!r}") from None
    if annotation is float:
        try:
            return float(value)
        except ValueError:
            raise ConfigFileError(f"{where}: expected a number, got {value!r}") from None
    if annotation is str:
        return value.strip()
    if origin is list:
        inner = typing.get_args(annotation)[0]
        items = [p.strip() for p in value.split(",") if p.strip() != ""]
        return [_convert(p, inner, where) for p in items]
    raise ConfigFileError(f"{where}: unsupported field type {annotation}")


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse a config document; raises ConfigFileError with line-anchored messages."""
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    section = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        where = f"{source}:{line_no}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigFileError(
                    f"{where}: unknown section [{section}]; "
                    f"expected one of {sorted(_SECTIONS)}")
            continue
        if "=" not in line:
            raise ConfigFileError(f"{where}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigFileError(f"{where}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        cls, excluded = _SECTIONS[section]
        types = _field_types(cls)
        if key not in types or key in excluded:
            raise ConfigFileError(
                f"{where}: unknown key {key!r} in section [{section}]")
        values[section][key] = _convert(value, types[key], where)
    return _build(values, source)


def _build(values: dict, source: str) -> ExperimentConfig:
    for section, key in REQUIRED_FIELDS:
        if key not in values[section]:
            # run.seeds / out_dir may still arrive via CLI flags; the final
            # validate() call re-checks them.
            if section == "run":
                continue
            raise ConfigFileError(
                f"{source}: missing required field {section}.{key}")

    run = RunSettings(**values["run"])
    preset = run.train_preset.lower()
    if preset == "desk":
        train = TrainConfig.desk(**values["train"])
    elif preset == "paper":
        train = TrainConfig(**values["train"])
    else:
        raise ConfigFileError(
            f"{source}: run.train_preset must be 'desk' or 'paper', got {preset!r}")
    return ExperimentConfig(
        data=SplitConfig(**values["data"]),
        model=ModelConfig(**values["model"]),
        train=train,
        loss=LossWeights(**values["loss"]),
        flags=AblationFlags(**values["ablation"]),
        run=run,
    )


def apply_overrides(text: str, overrides: list[str]) -> str:
    """Turn repeatable ``--override section.key=value`` flags into config lines."""
    lines = [text]
    for item in overrides:
        head, _, value = item.partition("=")
        if "." not in head or not _:
            raise ConfigFileError(
                f"override {item!r} must look like section.key=value")
        section, key = head.split(".", 1)
        lines.append(f"[{section}]\n{key} = {value}")
    return "\n".join(lines)


def load_config(path: str, overrides: list[str] | None = None,
                out_dir: str | None = None,
                seeds: list[int] | None = None) -> ExperimentConfig:
    """Read, override and validate a config file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if overrides:
        text = apply_overrides(text, overrides)
    cfg = parse_config_text(text, source=path)
    if seeds:
        cfg.run.seeds = list(seeds)
    if out_dir:
        cfg.run.out_dir = out_dir
    if not cfg.run.out_dir:
        cfg.run.out_dir = os.environ.get(ENV_OUT_DIR, "")
    cfg.validate()
    return cfg


def config_to_text(cfg: ExperimentConfig) -> str:
    """Render a config back to its file form (used for provenance copies)."""
    sections = {
        "data": cfg.data, "model": cfg.model, "train": cfg.train,
        "loss": cfg.loss, "ablation": cfg.flags, "run": cfg.run,
    }
    out = []
    for name, obj in sections.items():
        _, excluded = _SECTIONS[name]
        out.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            if f.name in excluded:
                continue
            value = getattr(obj, f.name)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "none"
            out.append(f"{f.name} = {value}")
        out.append("")
    return "\n".join(out)
