"""Run configuration: model + training hyperparameters, named recipes, overrides.

A run config file is JSON with two sections, ``model`` and ``train``. Every
field of :class:`~infinilab.model.ModelConfig`, its ``attention`` block and
:class:`TrainConfig` may appear; missing fields take their defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import data
from .model import ModelConfig, desk_config, full_config


@dataclass
class TrainConfig:
    mode: str = "pretrain"  # or "finetune"
    steps: int = 2000
    batch_size: int = 8
    grad_accum: int = 1
    seq_len: int = 256
    base_lr: float = 1e-3
    warmup_steps: int = 100
    floor_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 500
    snapshot_every: int = 100
    flush_every: int = 1
    # pretraining corpus
    corpus_documents: int = 4000
    corpus_median: float = 40.0
    corpus_mean: float = 42.0
    # fine-tuning
    finetune_contexts: tuple = (64, 128, 192, 256)
    key_digits: int = 5
    init_checkpoint: str = ""

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"train.mode must be 'pretrain' or 'finetune', got {self.mode!r}")
        if self.floor_lr > self.base_lr:
            raise ValueError("train.floor_lr must not exceed train.base_lr")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("train.steps and train.warmup_steps must be >= 0")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("train.batch_size and train.grad_accum must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("train.dtype must be float32 or float64")
        self.finetune_contexts = tuple(int(c) for c in self.finetune_contexts)

    @property
    def tokens_per_step(self) -> int:
        return self.seq_len * self.batch_size

    def corpus_spec(self) -> data.CorpusSpec:
        return data.CorpusSpec(
            num_documents=self.corpus_documents,
            median_length=self.corpus_median,
            mean_length=self.corpus_mean,
            seed=self.seed,
        )


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=desk_config)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = {"model": self.model.to_dict(), "train": asdict(self.train)}
        d["train"]["finetune_contexts"] = list(self.train.finetune_contexts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - {"model", "train"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        tknown = {f.name for f in fields(TrainConfig)}
        tbad = set(d.get("train", {})) - tknown
        if tbad:
            raise ValueError(f"unknown train config fields: {sorted(tbad)}")
        model = ModelConfig.from_dict(d["model"]) if "model" in d else desk_config()
        return cls(model, TrainConfig(**d.get("train", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _full_pretrain(memory: bool) -> RunConfig:
    return RunConfig(
        full_config(memory_enabled=memory),
        TrainConfig(
            steps=30000,
            batch_size=4,
            seq_len=8192,
            base_lr=6e-5 if memory else 1.2e-4,
            warmup_steps=500,
            floor_lr=6e-6,
            corpus_documents=100000,
            corpus_median=418,
            corpus_mean=716,
            checkpoint_every=1000,
        ),
    )


def _full_finetune(memory: bool) -> RunConfig:
    return RunConfig(
        full_config(memory_enabled=memory),
        TrainConfig(
            mode="finetune",
            steps=500,
            batch_size=64,
            seq_len=32768,
            base_lr=7.5e-5,
            warmup_steps=50,
            floor_lr=3e-6,
            finetune_contexts=(1024, 4096, 8192, 16384, 32768),
            checkpoint_every=500,
        ),
    )


# Desk scale: the same recipe shape on a CPU budget. Segment 64, training
# sequences of 4 segments, evaluation out to 16 segments.
DESK_LR = 1e-3


def _desk_pretrain(memory: bool) -> RunConfig:
    return RunConfig(
        desk_config(memory_enabled=memory),
        TrainConfig(
            steps=2000,
            batch_size=8,
            seq_len=256,
            base_lr=DESK_LR if memory else 2 * DESK_LR,
            warmup_steps=100,
            floor_lr=DESK_LR / 10,
        ),
    )


def _desk_finetune(memory: bool) -> RunConfig:
    return RunConfig(
        desk_config(memory_enabled=memory),
        TrainConfig(
            mode="finetune",
            steps=500,
            batch_size=16,
            seq_len=256,
            base_lr=1e-3,
            warmup_steps=50,
            floor_lr=4e-5,
            finetune_contexts=(64, 128, 192, 256),
        ),
    )


RECIPES = {
    "full_pretrain": lambda: _full_pretrain(True),
    "full_baseline": lambda: _full_pretrain(False),
    "full_finetune": lambda: _full_finetune(True),
    "full_baseline_finetune": lambda: _full_finetune(False),
    "desk_pretrain": lambda: _desk_pretrain(True),
    "desk_baseline": lambda: _desk_pretrain(False),
    "desk_finetune": lambda: _desk_finetune(True),
    "desk_baseline_finetune": lambda: _desk_finetune(False),
}


def load_config(name_or_path: str | Path) -> RunConfig:
    """A built-in recipe name or a path to a JSON run config."""
    key = str(name_or_path)
    if key in RECIPES:
        return RECIPES[key]()
    path = Path(key)
    if not path.exists():
        raise FileNotFoundError(f"no recipe or config file named {key!r} (recipes: {', '.join(RECIPES)})")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.split(",") if v)
    return value


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.field=value`` overrides, e.g. ``train.steps=10`` or
    ``model.attention.segment_length=32``. A bare field name is looked up in
    ``train`` first, then ``model``, then ``model.attention``."""
    d = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like KEY=VALUE")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1:
            for prefix in (["train"], ["model"], ["model", "attention"]):
                node = d
                for p in prefix:
                    node = node[p]
                if parts[0] in node:
                    parts = prefix + parts
                    break
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"unknown config field {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config field {key!r}")
        current = node[parts[-1]]
        if isinstance(current, list):
            current = tuple(current)
        node[parts[-1]] = _coerce(value, current)
    # keep attention dims in step with the model block
    att = d["model"]["attention"]
    att["heads"] = d["model"]["heads"]
    att["d_model"] = d["model"]["d_model"]
    if att["d_key"] * att["heads"] != d["model"]["d_model"]:
        att["d_key"] = att["d_value"] = d["model"]["d_model"] // d["model"]["heads"]
    d["model"]["kv_heads"] = d["model"]["heads"]
    return RunConfig.from_dict(d)


def config_fields() -> list[str]:
    """Dotted names of every configurable field (used for --help)."""
    cfg = RunConfig()
    d = cfg.to_dict()
    out = []

    def walk(node, prefix):
        for k, v in node.items():
            if isinstance(v, dict):
                walk(v, prefix + k + ".")
            else:
                out.append(prefix + k)

    walk(d, "")
    return out


def config_diff(a: RunConfig, b: RunConfig) -> set[str]:
    """Dotted field names whose values differ between two configs."""
    da, db = a.to_dict(), b.to_dict()
    out: set[str] = set()

    def walk(x, y, prefix):
        for k in set(x) | set(y):
            if isinstance(x.get(k), dict) and isinstance(y.get(k), dict):
                walk(x[k], y[k], prefix + k + ".")
            elif x.get(k) != y.get(k):
                out.add(prefix + k)

    walk(da, db, "")
    return out


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, seed=int(seed)))
