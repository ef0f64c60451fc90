"""AdamW training loop with warmup + cosine schedule, clipping and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import data
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .model import Weights, forward, init_weights
from .telemetry import TelemetryWriter, snapshot_from_weights

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float

    def __post_init__(self):
        if self.floor_lr > self.base_lr:
            raise ValueError("floor_lr must not exceed base_lr")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")

    @classmethod
    def from_train(cls, tc: TrainConfig) -> Schedule:
        # short smoke runs keep the recipe's warmup but never past the last step
        return cls(tc.base_lr, min(tc.warmup_steps, tc.steps), tc.steps, tc.floor_lr)


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup from 0 to base, then cosine decay to the floor at ``total_steps``."""
    s = schedule
    if s.warmup_steps > 0 and step <= s.warmup_steps:
        return s.base_lr * (step / s.warmup_steps)
    span = s.total_steps - s.warmup_steps
    if span <= 0 or step >= s.total_steps:
        return s.floor_lr
    progress = (step - s.warmup_steps) / span
    return s.floor_lr + (s.base_lr - s.floor_lr) * (1 + math.cos(math.pi * progress)) / 2


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads, max_norm: float = 1.0) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    grads = list(grads)
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_train(cls, tc: TrainConfig) -> OptimizerState:
        return cls(tc.beta1, tc.beta2, tc.eps, tc.weight_decay, tc.clip_norm)

    def moments(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        return out

    def load_moments(self, moments: Mapping[str, np.ndarray]) -> None:
        for key, arr in moments.items():
            _, kind, name = key.split(".", 2)
            (self.m if kind == "m" else self.v)[name] = arr.copy()


def decays(name: str, param: np.ndarray) -> bool:
    """Weight decay applies to matrices only; norms and balance gates are exempt."""
    return param.ndim >= 2


def adamw_step(params: Mapping[str, T.Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name, p.data):
            p.data -= (lr * state.weight_decay) * p.data
        p.data -= lr * update


# ------------------------------------------------------------------ batches


class BatchSource:
    """Deterministic batches: the batch for step ``s`` depends only on (seed, s)."""

    def __init__(self, tc: TrainConfig):
        self.tc = tc
        self.docs = data.generate_corpus(tc.corpus_spec()) if tc.mode == "pretrain" else None

    def micro_batches(self, step: int):
        tc = self.tc
        for micro in range(tc.grad_accum):
            rng = np.random.default_rng(data.derive_seed(tc.seed, 100, step, micro))
            if tc.mode == "pretrain":
                window = data.pack_batch(self.docs, tc.batch_size, tc.seq_len, rng)
                yield window[:, :-1], window[:, 1:], None
            else:
                offset = (step * tc.grad_accum + micro) * tc.batch_size
                samples = data.make_finetune_samples(
                    tc.batch_size, tc.finetune_contexts, tc.seed, key_digits=tc.key_digits, offset=offset
                )
                yield data.pad_samples(samples)


# --------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    config: RunConfig
    weights: Weights
    optimizer: OptimizerState
    losses: list[float]
    grad_norms: list[float]

    @property
    def step(self) -> int:
        return self.optimizer.step


def _dtype(tc: TrainConfig):
    return np.float64 if tc.dtype == "float64" else np.float32


def loss_and_grads(weights: Weights, cfg: RunConfig, batches) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over micro-batches; gradients accumulate in the parameters' dtype (>= fp32)."""
    for p in weights.values():
        p.zero_grad()
    total = 0.0
    n = 0
    for inputs, targets, mask in batches:
        logits = forward(inputs, weights, cfg.model)
        loss = T.cross_entropy(logits, targets, mask)
        total += float(loss.data)
        n += 1
        loss.backward()
    grads = {}
    for name, p in weights.items():
        if p.grad is not None:
            grads[name] = p.grad / n if n > 1 else p.grad
    return total / max(n, 1), grads


def _save(path, cfg: RunConfig, weights: Weights, opt: OptimizerState) -> None:
    meta = {"step": opt.step, "run_config": cfg.to_dict()}
    save_checkpoint(path, cfg.model, weights, opt.moments(), meta)


def resume_from(path) -> tuple[RunConfig, Weights, OptimizerState]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt.meta["run_config"])
    opt = OptimizerState.from_train(cfg.train)
    opt.load_moments(ckpt.moments)
    opt.step = ckpt.step
    return cfg, ckpt.weights, opt


def train_loop(
    cfg: RunConfig,
    run_dir=None,
    weights: Weights | None = None,
    optimizer: OptimizerState | None = None,
    stop_at: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run (or continue) training until ``stop_at`` or ``cfg.train.steps``.

    Each step: forward, masked cross-entropy, backward, clip, AdamW, telemetry.
    """
    tc = cfg.train
    if weights is None:
        if tc.init_checkpoint:
            weights = load_checkpoint(tc.init_checkpoint).weights
        else:
            weights = init_weights(cfg.model, tc.seed, _dtype(tc))
    optimizer = optimizer or OptimizerState.from_train(tc)
    schedule = Schedule.from_train(tc) if tc.steps > 0 else None
    source = BatchSource(tc)
    end = tc.steps if stop_at is None else min(stop_at, tc.steps)

    writer = TelemetryWriter(run_dir, tc.flush_every) if run_dir is not None else None
    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir is not None else None
    memory = cfg.model.attention.memory_enabled
    losses, norms = [], []
    try:
        while optimizer.step < end:
            step = optimizer.step + 1
            lr = lr_at(schedule, step)
            loss, grads = loss_and_grads(weights, cfg, source.micro_batches(step))
            if not math.isfinite(loss):
                _diagnose(run_dir, step, loss, weights)
                raise TrainingDivergedError(f"non-finite loss {loss} at step {step}")
            norm = clip_global_norm(grads.values(), tc.clip_norm)
            adamw_step(weights, grads, optimizer, lr)
            losses.append(loss)
            norms.append(norm)
            if writer is not None:
                writer.log_step(step, loss, norm, lr)
                if memory and (step % tc.snapshot_every == 0 or step == end):
                    writer.log_snapshot(snapshot_from_weights(weights, cfg.model, step))
                if tc.checkpoint_every and step % tc.checkpoint_every == 0:
                    _save(ckpt_dir / f"step_{step:06d}.ckpt", cfg, weights, optimizer)
            if on_step is not None:
                on_step(step, loss)
            if step % 50 == 0:
                log.info("step %d loss %.4f grad_norm %.3f lr %.2e", step, loss, norm, lr)
        if ckpt_dir is not None:
            _save(ckpt_dir / "final.ckpt", cfg, weights, optimizer)
    finally:
        if writer is not None:
            writer.close()
    for p in weights.values():
        p.zero_grad()
    return TrainResult(cfg, weights, optimizer, losses, norms)


def _diagnose(run_dir, step: int, loss: float, weights: Weights) -> Path | None:
    if run_dir is None:
        return None
    path = Path(run_dir) / f"diagnostic_step_{step:06d}.json"
    report = {
        "step": step,
        "loss": repr(loss),
        "non_finite_params": [n for n, p in weights.items() if not np.all(np.isfinite(p.data))],
    }
    path.write_text(json.dumps(report, indent=2))
    return path
