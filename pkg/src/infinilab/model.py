"""LLaMA-style decoder hosting baseline or Infini-attention layers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, attention_forward, hard_sigmoid
from .tensor import Tensor

Weights = Dict[str, Tensor]


@dataclass
class ModelConfig:
    layers: int = 4
    d_model: int = 128
    d_ff: int = 512
    heads: int = 4
    kv_heads: int = 4
    vocab_size: int = 259
    max_context: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    tie_embeddings: bool = False
    init_std: float = 0.02
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        if self.heads % self.kv_heads:
            raise ValueError("heads must be divisible by kv_heads")
        if self.kv_heads != self.heads:
            raise NotImplementedError("grouped-query attention is not implemented; use kv_heads == heads")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        att = self.attention
        if att.heads != self.heads or att.d_model != self.d_model:
            raise ValueError("attention.heads/d_model must match the model's heads/d_model")
        if att.d_key % 2:
            raise ValueError("d_key must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def make_config(
    layers: int,
    d_model: int,
    heads: int,
    d_ff: int,
    vocab_size: int,
    segment_length: int,
    memory_enabled: bool = True,
    max_context: int = 256,
    **attention_overrides,
) -> ModelConfig:
    hd = d_model // heads
    att = AttentionConfig(
        heads=heads,
        d_model=d_model,
        d_key=hd,
        d_value=hd,
        segment_length=segment_length,
        memory_enabled=memory_enabled,
        **attention_overrides,
    )
    return ModelConfig(
        layers=layers,
        d_model=d_model,
        d_ff=d_ff,
        heads=heads,
        kv_heads=heads,
        vocab_size=vocab_size,
        max_context=max_context,
        attention=att,
    )


def full_config(memory_enabled: bool = True) -> ModelConfig:
    """The 300M-parameter shape: 12 layers, 1024 wide, 4096 FFN, 8 heads, 49,152 vocab."""
    return make_config(
        layers=12,
        d_model=1024,
        heads=8,
        d_ff=4096,
        vocab_size=49152,
        segment_length=1024,
        memory_enabled=memory_enabled,
        max_context=8192,
    )


def desk_config(memory_enabled: bool = True, **overrides) -> ModelConfig:
    cfg = make_config(
        layers=4,
        d_model=128,
        heads=4,
        d_ff=512,
        vocab_size=259,
        segment_length=64,
        memory_enabled=memory_enabled,
        max_context=256,
    )
    return replace(cfg, **overrides) if overrides else cfg


# ------------------------------------------------------------------ weights


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    att = cfg.attention
    D, V = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, D)}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (D,)
        shapes[p + "wq"] = (D, att.heads * att.d_key)
        shapes[p + "wk"] = (D, att.heads * att.d_key)
        shapes[p + "wv"] = (D, att.heads * att.d_value)
        shapes[p + "wo"] = (att.heads * att.d_value, D)
        if att.memory_enabled:
            shapes[p + "gate"] = (att.heads,)
        shapes[p + "mlp_norm"] = (D,)
        shapes[p + "w_gate"] = (D, cfg.d_ff)
        shapes[p + "w_up"] = (D, cfg.d_ff)
        shapes[p + "w_down"] = (cfg.d_ff, D)
    shapes["final_norm"] = (D,)
    if not cfg.tie_embeddings:
        shapes["lm_head"] = (D, V)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in weight_shapes(cfg).values()))


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Weights:
    rng = np.random.default_rng(seed)
    weights: Weights = {}
    for name, shape in weight_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            data = np.ones(shape)
        elif leaf == "gate":
            data = np.full(shape, cfg.attention.balance_init)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        weights[name] = Tensor(data.astype(dtype), requires_grad=True)
    return weights


def gate_raws(weights: Weights, cfg: ModelConfig) -> np.ndarray:
    """Raw balance parameters as a [layers, heads] array."""
    if not cfg.attention.memory_enabled:
        raise ValueError("model has no balance gates (memory disabled)")
    return np.stack([weights[f"layers.{i}.gate"].data for i in range(cfg.layers)]).astype(np.float64)


def balance_factors(weights: Weights, cfg: ModelConfig) -> np.ndarray:
    """Activated balance factors alpha as a [layers, heads] array."""
    raws = gate_raws(weights, cfg)
    return np.vectorize(hard_sigmoid)(raws) if raws.size else raws


# ------------------------------------------------------------------- rotary


def rope_tables(positions, dim: int, base: float, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    positions = np.asarray(positions, dtype=np.float64)
    inv = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions[:, None] * inv[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate pairs (i, i + d/2) of ``x`` [..., T, d] by position / base^(2i/d)."""
    cos, sin = rope_tables(positions, x.shape[-1], base, x.dtype)
    return T.rotate_pairs(x, cos, sin)


# ------------------------------------------------------------------ forward


def _mlp(x: Tensor, weights: Weights, p: str) -> Tensor:
    gate = T.silu(T.matmul(x, weights[p + "w_gate"]))
    up = T.matmul(x, weights[p + "w_up"])
    return T.matmul(T.mul(gate, up), weights[p + "w_down"])


def forward(tokens, weights: Weights, cfg: ModelConfig) -> Tensor:
    """Logits [..., T, vocab] for token ids [..., T]."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 0 or tokens.shape[-1] < 1:
        raise ValueError("forward needs at least one token")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError(f"token id out of range for vocabulary of {cfg.vocab_size}")
    dtype = weights["embed"].dtype
    length = tokens.shape[-1]
    rope = rope_tables(np.arange(length), cfg.attention.d_key, cfg.rope_base, dtype)

    h = T.embedding_lookup(weights["embed"], tokens)
    for i in range(cfg.layers):
        p = f"layers.{i}."
        att_w = {n: weights[p + n] for n in ("wq", "wk", "wv", "wo", "gate") if p + n in weights}
        h = T.add(h, attention_forward(T.rmsnorm(h, weights[p + "attn_norm"], cfg.norm_eps), att_w, cfg.attention, rope))
        h = T.add(h, _mlp(T.rmsnorm(h, weights[p + "mlp_norm"], cfg.norm_eps), weights, p))
    h = T.rmsnorm(h, weights["final_norm"], cfg.norm_eps)
    head = weights["lm_head"] if not cfg.tie_embeddings else weights["embed"].transpose()
    return T.matmul(h, head)


