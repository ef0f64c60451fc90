"""Segmented causal attention and Infini-attention.

Each segment of the input runs ordinary causal softmax attention over itself.
With memory enabled, queries additionally read a compressive memory built
from the keys/values of all *earlier* segments, and a per-head balance gate
mixes the two read-outs::

    A = alpha * A_mem + (1 - alpha) * A_local

The memory is the linear-attention form with feature map ``elu(x) + 1``::

    A_mem = sigma(Q) M / (sigma(Q) N + eps)
    M <- M + sigma(K)^T V,   N <- N + sum_t sigma(K_t)

Retrieval happens before the segment's own keys are absorbed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class AttentionConfig:
    heads: int = 4
    d_model: int = 128
    d_key: int = 32
    d_value: int = 32
    segment_length: int = 64
    memory_enabled: bool = True
    causal: bool = True
    balance_init: float = 0.0
    memory_detach: bool = False
    epsilon_retrieve: float = 1e-6

    def __post_init__(self):
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")
        if self.d_model != self.heads * self.d_value:
            raise ValueError(
                f"d_model ({self.d_model}) must equal heads x d_value ({self.heads} x {self.d_value})"
            )
        if not self.causal:
            raise ValueError("only causal attention is supported")
        if self.epsilon_retrieve <= 0:
            raise ValueError("epsilon_retrieve must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MemoryState:
    """Compressive memory: ``M`` is [..., heads, d_key, d_value], ``N`` is [..., heads, d_key]."""

    M: Tensor
    N: Tensor

    @classmethod
    def empty(cls, heads: int, d_key: int, d_value: int, batch_shape=(), dtype=T.DEFAULT_DTYPE) -> MemoryState:
        return cls(
            Tensor(np.zeros((*batch_shape, heads, d_key, d_value), dtype=dtype)),
            Tensor(np.zeros((*batch_shape, heads, d_key), dtype=dtype)),
        )

    def detach(self) -> MemoryState:
        return MemoryState(self.M.detach(), self.N.detach())


def hard_sigmoid(raw: float) -> float:
    return min(max(raw / 6.0 + 0.5, 0.0), 1.0)


def gate_alpha(raw: Tensor) -> Tensor:
    """Activated balance factors in [0, 1], one per head."""
    return T.hard_sigmoid(raw)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def local_causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_key)) v with a lower-triangular (inclusive) mask."""
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2]):
        raise ValueError(f"q, k, v must share the segment axis: {q.shape}, {k.shape}, {v.shape}")
    S, dk = q.shape[-2], q.shape[-1]
    scores = T.scale(T.matmul(q, k.swapaxes(-1, -2)), 1.0 / np.sqrt(dk))
    return T.matmul(T.softmax_lastdim(scores, causal_mask(S)), v)


def memory_retrieve(q: Tensor, mem: MemoryState, eps: float) -> Tensor:
    """Normalised read of the stored values for every query row."""
    sq = T.elu_plus_one(q)
    num = T.matmul(sq, mem.M)
    den = T.matmul(sq, T.reshape(mem.N, (*mem.N.shape, 1)))
    return T.div(num, T.add(den, eps))


def memory_update(mem: MemoryState, k: Tensor, v: Tensor) -> MemoryState:
    """Absorb a segment's keys and values; ``mem`` itself is left untouched."""
    if k.shape[-2] == 0:
        return mem
    sk = T.elu_plus_one(k)
    M = T.add(mem.M, T.matmul(sk.swapaxes(-1, -2), v))
    N = T.add(mem.N, T.sum_(sk, axis=-2))
    return MemoryState(M, N)


def combine(a_mem: Tensor, a_local: Tensor, alpha: Tensor) -> Tensor:
    """Per-head convex mix; ``alpha`` has one entry per head (axis -3 of the inputs)."""
    if a_mem.shape != a_local.shape:
        raise ValueError(f"combine shape mismatch: {a_mem.shape} vs {a_local.shape}")
    a = T.reshape(alpha, (alpha.shape[0], 1, 1))
    return T.add(T.mul(a, a_mem), T.mul(T.sub(1.0, a), a_local))


def split_heads(x: Tensor, heads: int, dim: int) -> Tensor:
    """[..., T, heads*dim] -> [..., heads, T, dim]"""
    *lead, t, _ = x.shape
    x = T.reshape(x, (*lead, t, heads, dim))
    return x.swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, T, dim] -> [..., T, heads*dim]"""
    *lead, h, t, d = x.shape
    return T.reshape(x.swapaxes(-2, -3), (*lead, t, h * d))


def segment_bounds(length: int, seg: int):
    """[start, end) of each segment; the last one may be short."""
    for start in range(0, length, seg):
        yield start, min(start + seg, length)


def infini_forward(
    x: Tensor,
    weights: Mapping[str, Tensor],
    cfg: AttentionConfig,
    rope: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Segment-wise attention over ``x`` [..., T, d_model].

    ``weights`` holds ``wq, wk, wv, wo`` and, with memory enabled, ``gate``
    (raw balance parameters, one per head). ``rope`` is an optional (cos, sin)
    table over absolute positions; it rotates q/k for the local path only.
    A fresh memory is used on every call.
    """
    length = x.shape[-2]
    if length < 1:
        raise ValueError("attention needs at least one position")
    H, dk, dv = cfg.heads, cfg.d_key, cfg.d_value
    q = split_heads(T.matmul(x, weights["wq"]), H, dk)
    k = split_heads(T.matmul(x, weights["wk"]), H, dk)
    v = split_heads(T.matmul(x, weights["wv"]), H, dv)
    if rope is not None:
        q_loc, k_loc = T.rotate_pairs(q, *rope), T.rotate_pairs(k, *rope)
    else:
        q_loc, k_loc = q, k

    if cfg.memory_enabled:
        alpha = gate_alpha(weights["gate"])
        mem = MemoryState.empty(H, dk, dv, q.shape[:-3], x.dtype)

    outs = []
    for lo, hi in segment_bounds(length, cfg.segment_length):
        sl = (Ellipsis, slice(lo, hi), slice(None))
        a_local = local_causal_attention(q_loc[sl], k_loc[sl], v[sl])
        if cfg.memory_enabled:
            a_mem = memory_retrieve(q[sl], mem, cfg.epsilon_retrieve)
            outs.append(combine(a_mem, a_local, alpha))
            mem = memory_update(mem, k[sl], v[sl])
            if cfg.memory_detach:
                mem = mem.detach()
        else:
            outs.append(a_local)
    a = outs[0] if len(outs) == 1 else T.concat(outs, axis=-2)
    return T.matmul(merge_heads(a), weights["wo"])


def segmented_attention(
    x: Tensor,
    weights: Mapping[str, Tensor],
    cfg: AttentionConfig,
    rope: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Baseline: the same segmentation with memory switched off."""
    length = x.shape[-2]
    H, dk, dv = cfg.heads, cfg.d_key, cfg.d_value
    q = split_heads(T.matmul(x, weights["wq"]), H, dk)
    k = split_heads(T.matmul(x, weights["wk"]), H, dk)
    v = split_heads(T.matmul(x, weights["wv"]), H, dv)
    if rope is not None:
        q, k = T.rotate_pairs(q, *rope), T.rotate_pairs(k, *rope)
    outs = []
    for lo, hi in segment_bounds(length, cfg.segment_length):
        sl = (Ellipsis, slice(lo, hi), slice(None))
        outs.append(local_causal_attention(q[sl], k[sl], v[sl]))
    a = outs[0] if len(outs) == 1 else T.concat(outs, axis=-2)
    return T.matmul(merge_heads(a), weights["wo"])


def attention_forward(x, weights, cfg: AttentionConfig, rope=None) -> Tensor:
    if cfg.memory_enabled:
        return infini_forward(x, weights, cfg, rope)
    return segmented_attention(x, weights, cfg, rope)
