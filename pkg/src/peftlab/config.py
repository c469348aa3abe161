"""Experiment configuration: nested dataclasses, JSON round-trip, dotted
key overrides, and a stable content hash.

One JSON file fully determines a run.  Command-line overrides use dotted
paths into the nested structure (`adapter.r=4`, `optimizer.lr=0.001`);
each override is coerced to the type of the value it replaces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "CorpusConfig",
    "ModelConfig",
    "AdapterPolicy",
    "OptimizerConfig",
    "PretrainConfig",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "apply_overrides",
    "config_hash",
    "resolve_out_dir",
    "OUT_DIR_ENV",
]

OUT_DIR_ENV = "PEFTLAB_OUT"


@dataclass
class CorpusConfig:
    sizes: dict = field(default_factory=lambda: {"train": 4480, "val": 960, "test": 960})
    frames: int = 8
    patches: int = 4
    d_raw: int = 8
    noise_std: float = 0.1


@dataclass
class ModelConfig:
    width: int = 32
    heads: int = 4
    n_blocks: int = 2


@dataclass
class AdapterPolicy:
    kind: str = "temporal_dora"
    r: int = 8
    alpha: float | None = None  # None means 2r
    operator: str = "mha"
    heads: int = 4
    pos_embed: bool = True
    t_max: int | None = None  # None means the corpus frame count
    d_st: int | None = None  # None means half the input width
    k_t: int = 3
    epsilon: float = 1e-8
    question_kind: str = "dora"
    question_r: int | None = None  # None means r


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 2e-4
    epochs: int = 20
    batch: int = 1
    grad_accum: int = 8


@dataclass
class PretrainConfig:
    epochs: int = 2
    lr: float = 3e-3
    batch: int = 16
    max_frames: int = 4000
    holdout_fraction: float = 0.1


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterPolicy = field(default_factory=AdapterPolicy)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for name, sub in (("corpus", CorpusConfig), ("model", ModelConfig),
                          ("adapter", AdapterPolicy), ("optimizer", OptimizerConfig),
                          ("pretrain", PretrainConfig)):
            if name in kwargs and isinstance(kwargs[name], dict):
                extra = set(kwargs[name]) - {f.name for f in dataclasses.fields(sub)}
                if extra:
                    raise ValueError(f"unknown keys in {name}: {sorted(extra)}")
                kwargs[name] = sub(**kwargs[name])
        return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _coerce(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse {raw!r} as a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str):
        return raw
    # None or containers: accept JSON, fall back to bare strings/null
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if raw.lower() in ("none", "null"):
            return None
        return raw


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply `a.b=value` strings on top of a config; returns a new config."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().lstrip("-").split(".")
        node = data
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ValueError(f"unknown config path {dotted!r}")
            node = node[key]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ValueError(f"unknown config path {dotted!r}")
        node[leaf] = _coerce(raw, node[leaf])
    return ExperimentConfig.from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def resolve_out_dir(cfg: ExperimentConfig) -> Path:
    """Output root: explicit config value, else the environment variable,
    else ./runs."""
    if cfg.out_dir:
        return Path(cfg.out_dir)
    env = os.environ.get(OUT_DIR_ENV)
    return Path(env) if env else Path("runs")
