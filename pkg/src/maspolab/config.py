"""Experiment configuration files (YAML).

Layout mirrors the type hierarchy::

    task:
      kind: copy            # copy | modsum
      vocab_size: 4
      seq_len: 3
      num_queries: 4
      target_seed: 0        # or an explicit `targets:` list
    train:
      method: maspo
      gate: {sigma_base: 1.0, alpha: 0.3, beta_low: 0.03, beta_high: 0.03}
      groups_per_step: 4
      ...
    output_dir: runs/maspo
    oracle_every: 10

Unknown keys anywhere are errors.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .gating import ConfigError, GateParams
from .io import atomic_write_text
from .tasks import TaskSpec, make_task
from .trainer import TrainConfig

SWEEP_PARAMS = ("alpha", "beta_low", "beta_high", "beta", "learning_rate", "eps_high")


@dataclass
class ExperimentConfig:
    task: TaskSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/experiment"
    oracle_every: int = 0

    def __post_init__(self):
        if not isinstance(self.oracle_every, int) or isinstance(self.oracle_every, bool) or self.oracle_every < 0:
            raise ConfigError(f"oracle_every must be a nonnegative integer, got {self.oracle_every!r}")
        if self.oracle_every and not self.task.enumerable:
            raise ConfigError("oracle_every requires an enumerable task (vocab_size**seq_len <= 4096)")

    def with_param(self, name: str, value: float, seed: int | None = None) -> "ExperimentConfig":
        """Copy with one sweepable hyperparameter replaced."""
        cfg = copy.deepcopy(self)
        if name == "beta":
            gate = replace(cfg.train.gate, beta_low=value, beta_high=value)
        elif name in ("alpha", "beta_low", "beta_high", "eps_high"):
            gate = replace(cfg.train.gate, **{name: value})
        elif name == "learning_rate":
            gate = cfg.train.gate
            cfg.train.learning_rate = value
        else:
            raise ConfigError(f"cannot sweep {name!r}; expected one of {SWEEP_PARAMS}")
        cfg.train.gate = gate
        if seed is not None:
            cfg.train.seed = seed
        cfg.train.__post_init__()
        return cfg


def _take(section: dict, allowed: set[str], where: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where + '.' if where else ''}{unknown[0]}: unknown key")
    return dict(section)


def _coerce_float(section: dict, where: str, names) -> None:
    for name in names:
        if name in section:
            value = section[name]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number, got {value!r}")
            section[name] = float(value)


def _build(cls, kwargs: dict, where: str):
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(where) else f"{where}: {msg}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    top = _take(data, {"task", "train", "output_dir", "oracle_every"}, "")
    if "task" not in top:
        raise ConfigError("task: missing section")

    task_d = _take(top["task"], {"kind", "vocab_size", "seq_len", "num_queries", "targets", "target_seed"}, "task")
    for req in ("kind", "vocab_size", "seq_len", "num_queries"):
        if req not in task_d:
            raise ConfigError(f"task.{req}: missing")
    seed = task_d.pop("target_seed", 0)
    if "targets" in task_d:
        task = _build(TaskSpec, task_d, "task")
    else:
        try:
            task = make_task(task_d["kind"], task_d["vocab_size"], task_d["seq_len"], task_d["num_queries"], seed=seed)
        except (ConfigError, TypeError, ValueError) as exc:
            raise ConfigError(f"task: {exc}") from None

    train_fields = {f.name for f in fields(TrainConfig)}
    train_d = _take(top.get("train", {}), train_fields, "train")
    gate_fields = {f.name for f in fields(GateParams)}
    gate_d = _take(train_d.pop("gate", {}), gate_fields, "train.gate")
    _coerce_float(gate_d, "train.gate", gate_fields)
    gate = _build(GateParams, gate_d, "train.gate")
    _coerce_float(train_d, "train", ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "entropy_coeff", "adv_reweight_alpha"))
    train = _build(TrainConfig, {**train_d, "gate": gate}, "train")

    return ExperimentConfig(
        task=task,
        train=train,
        output_dir=str(top.get("output_dir", "runs/experiment")),
        oracle_every=top.get("oracle_every", 0),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    train = asdict(cfg.train)
    train["method"] = cfg.train.method.value
    return {
        "task": {
            "kind": cfg.task.kind,
            "vocab_size": cfg.task.vocab_size,
            "seq_len": cfg.task.seq_len,
            "num_queries": cfg.task.num_queries,
            "targets": copy.deepcopy(cfg.task.targets),
        },
        "train": train,
        "output_dir": cfg.output_dir,
        "oracle_every": cfg.oracle_every,
    }


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from None
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    atomic_write_text(Path(path), dump_config(cfg))
