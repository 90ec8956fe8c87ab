"""Experiment configuration and its YAML/JSON file format."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .decoder import DenoisingConfig
from .finetune import FROZEN, STRATEGIES, FinetuneStrategy
from .pipeline import ModelConfig
from .speech import ContrastiveConfig
from .data import SynthTaskSpec

MODES = ("bilingual", "multilingual")
PRESETS = {**STRATEGIES, FROZEN.name: FROZEN}


@dataclass
class DataConfig:
    synth: SynthTaskSpec | None = field(default_factory=SynthTaskSpec)
    manifest_dir: str | None = None
    seed: int = 0


@dataclass
class PretrainConfig:
    enabled: bool = True
    encoder: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    decoder: DenoisingConfig = field(default_factory=DenoisingConfig)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    strategy: str | dict = "best"
    mode: str = "bilingual"
    pairs: list[str] = field(default_factory=list)
    lr_candidates: list[float] = field(default_factory=lambda: [1e-3])
    batch_size: int = 16
    steps: int = 2000
    eval_interval: int = 100
    warmup_steps: int = 100
    clip_norm: float = 1.0
    label_smoothing: float = 0.3
    beam: int = 5
    max_decode_len: int = 32
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr_candidates:
            raise ValueError("lr_candidates must not be empty")
        self.finetune_strategy()

    def finetune_strategy(self) -> FinetuneStrategy:
        if isinstance(self.strategy, str):
            if self.strategy not in PRESETS:
                raise ValueError(f"unknown strategy preset {self.strategy!r}; choose from {sorted(PRESETS)}")
            return PRESETS[self.strategy]
        return FinetuneStrategy.from_dict(self.strategy)

    def to_dict(self) -> dict:
        # json round trip turns tuples into lists so YAML stays plain
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def _build(tp, value):
    """Recursively construct dataclasses (and tuples/lists of them) from plain data."""
    origin = typing.get_origin(tp)
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValueError(f"expected a mapping for {tp.__name__}, got {value!r}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise ValueError(f"unknown {tp.__name__} keys: {sorted(unknown)}")
        return tp(**{k: _build(hints[k], v) for k, v in value.items()})
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        for a in args:
            if dataclasses.is_dataclass(a) and isinstance(value, dict):
                return _build(a, value)
        return value
    if origin in (list, tuple) and isinstance(value, (list, tuple)):
        args = typing.get_args(tp)
        inner = args[0] if args else Any
        return [_build(inner, v) for v in value] if origin is list else tuple(value)
    return value


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
