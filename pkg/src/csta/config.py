"""Run configuration: a sectioned key = value file merged with command-line overrides.

Example::

    [run]
    seed = 1
    jobs = 1

    [model]
    reduction = 4
    softmax_axes = td

    [train]
    epochs = 100
    learning_rate = 0.001

    [eval]
    folds = 5
    repeats = 10
    budget_ratio = 0.15
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .shots import DEFAULT_PENALTY
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    folds: int = 5
    repeats: int = 10
    budget_ratio: float = 0.15
    kts_penalty: float = DEFAULT_PENALTY


@dataclass
class RunConfig:
    data: str | None = None
    out: str | None = None
    seed: int = 0
    jobs: int = 1
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self, dim: int) -> ModelConfig:
        opts = {"dim": dim, "seed": self.seed, **self.model}
        if "dropout" not in self.model and "dropout" in self.train:
            opts["dropout"] = self.train["dropout"]
        return ModelConfig(**opts)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def to_ini(self, dim: int | None = None) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"data": self.data or "", "out": self.out or "", "seed": str(self.seed), "jobs": str(self.jobs)}
        model = self.model_config(dim).to_dict() if dim else dict(self.model)
        model.pop("stages", None)
        cp["model"] = {k: str(v) for k, v in model.items()}
        cp["train"] = {k: str(v) for k, v in self.train_config().__dict__.items()}
        cp["eval"] = {k: str(v) for k, v in self.eval.__dict__.items()}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)


def _coerce(value: str, target_type, where: str):
    v = value.strip()
    try:
        if target_type is bool:
            low = v.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if target_type is int:
            return int(v)
        if target_type is float:
            return float(v)
        if target_type == "optional_float":
            return None if v.lower() in ("", "none") else float(v)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {value!r} as {getattr(target_type, '__name__', target_type)}") from None
    return v


_MODEL_TYPES = {"dim": int, "reduction": int, "dropout": float, "softmax_axes": str, "key_value": bool,
                "positional": bool, "cls_token": bool, "skip": bool, "ln_eps": float, "seed": int}
_TRAIN_TYPES = {"epochs": int, "batch_size": int, "learning_rate": float, "weight_decay": float, "beta1": float,
                "beta2": float, "eps": float, "dropout": float, "decoupled_weight_decay": bool,
                "max_grad_norm": "optional_float", "seed": int}
_EVAL_TYPES = {"folds": int, "repeats": int, "budget_ratio": float, "kts_penalty": float}
_RUN_TYPES = {"data": str, "out": str, "seed": int, "jobs": int}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser()
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    cfg = RunConfig()
    known = {"run": _RUN_TYPES, "model": _MODEL_TYPES, "train": _TRAIN_TYPES, "eval": _EVAL_TYPES}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in cp[section].items():
            types = known[section]
            if key not in types:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            value = _coerce(raw, types[key], f"{path} [{section}] {key}")
            if section == "run":
                setattr(cfg, key, (value or None) if types[key] is str else value)
            elif section == "model":
                cfg.model[key] = value
            elif section == "train":
                cfg.train[key] = value
            else:
                setattr(cfg.eval, key, value)
    return cfg


def apply_overrides(cfg: RunConfig, section: str, values: dict) -> RunConfig:
    """Set non-None ``values`` on a section ('run', 'model', 'train' or 'eval')."""
    for key, value in values.items():
        if value is None:
            continue
        if section == "run":
            setattr(cfg, key, value)
        elif section == "model":
            cfg.model[key] = value
        elif section == "train":
            cfg.train[key] = value
        elif section == "eval":
            if key not in {f.name for f in fields(EvalConfig)}:
                raise ConfigError(f"unknown eval option {key!r}")
            setattr(cfg.eval, key, value)
    return cfg
