"""Run configuration: dataclasses, YAML round-trip, dotted overrides.

A config file is a nested mapping mirroring ``RunConfig``; command-line
overrides use dotted paths (``model.dim=64``) and must name existing keys.
The fully resolved config echoed next to a run's outputs reloads into an
identical run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentPolicy
from .corpus import SyntheticSpec
from .model import ModelConfig
from .signal_prep import Modalities


@dataclass
class DataConfig:
    corpus_dir: str = ""
    prep_dir: str = ""
    train_size: int = 100
    dev_size: int = 100
    test_size: int = 0
    vocab_size: int = 4096

    def sizes(self) -> tuple[int, int, int]:
        return (self.train_size, self.dev_size, self.test_size)


_STAGE_EPOCHS = {"pretrain": 10, "finetune": 30}


@dataclass
class RunConfig:
    stage: str = "pretrain"
    seed: int = 0
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 6
    epochs: int = 0  # 0 picks the stage default (pretrain 10, finetune 30)
    modalities: str = "V+A+T+C"
    l2_in_loss: bool = False  # realize the weight penalty in the loss instead of AdamW
    normalize_sims: bool = False
    init_checkpoint: str = ""
    out_dir: str = "runs/run"
    checkpoint_every: int = 1
    protocol_runs: int = 5
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)

    @property
    def resolved_epochs(self) -> int:
        return self.epochs if self.epochs > 0 else _STAGE_EPOCHS[self.stage]

    def mask(self) -> Modalities:
        return Modalities.parse(self.modalities)

    def validate(self) -> None:
        if self.stage not in _STAGE_EPOCHS:
            raise ValueError(f"stage must be one of {sorted(_STAGE_EPOCHS)}, got {self.stage!r}")
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0 (0 = stage default)")
        Modalities.parse(self.modalities)
        self.model.validate()
        self.augment.validate()
        self.synth.validate()


_NESTED = {"data": DataConfig, "model": ModelConfig, "augment": AugmentPolicy, "synth": SyntheticSpec}


def dataclass_from_dict(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ValueError(f"config section '{path or cls.__name__}' must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f" in '{path}'" if path else ""
        raise ValueError(f"unknown config keys{where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        child_path = f"{path}.{name}" if path else name
        if path == "" and name in _NESTED:
            kwargs[name] = dataclass_from_dict(_NESTED[name], value, child_path)
            continue
        default = known[name].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    cfg = dataclass_from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def plain_dict(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: plain_dict(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [plain_dict(v) for v in value]
    if isinstance(value, list):
        return [plain_dict(v) for v in value]
    return value


def run_config_to_dict(cfg: RunConfig) -> dict:
    return plain_dict(cfg)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` items in place; every path must already exist."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ValueError(f"unknown config key {dotted!r}")
            node = node[k]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ValueError(f"unknown config key {dotted!r}")
        if isinstance(node[leaf], dict):
            raise ValueError(f"config key {dotted!r} is a section, not a value")
        node[leaf] = yaml.safe_load(raw)
    return data


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
    if loaded is None:
        loaded = {}
    if not isinstance(loaded, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    return loaded


def save_config(data: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")
    return path


def resolve_run_config(config_path: str | Path | None, overrides: list[str] | None = None,
                       base: dict | None = None) -> RunConfig:
    """defaults <- config file <- dotted overrides, validated."""
    data = run_config_to_dict(RunConfig())
    if base:
        data = _merge(data, base)
    if config_path:
        data = _merge(data, load_config_file(config_path))
    if overrides:
        apply_overrides(data, overrides)
    return run_config_from_dict(data)


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out
