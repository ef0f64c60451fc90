"""Passkey retrieval: greedy decoding, per-sample scoring and the accuracy grid."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import EVAL_DEPTHS, PasskeySample
from .model import ModelConfig, Weights, forward

LogitsFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class Model:
    """Callable wrapper: token ids [B, T] -> logits [B, T, vocab] as numpy."""

    config: ModelConfig
    weights: Weights

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        return forward(tokens, self.weights, self.config).data


def greedy_decode(model: LogitsFn, prompt, max_new: int) -> np.ndarray:
    """Append argmax tokens one at a time; ties go to the lowest token id."""
    seq = np.asarray(prompt, dtype=np.int64).reshape(-1)
    out = []
    for _ in range(max_new):
        logits = model(seq[None, :])[0, -1]
        nxt = int(np.argmax(logits))
        out.append(nxt)
        seq = np.append(seq, nxt)
    return np.asarray(out, dtype=np.int64)


def score_batch(model: LogitsFn, samples: Sequence[PasskeySample]) -> np.ndarray:
    """Exact-match correctness for samples sharing one token length.

    A causal model's greedy output equals the answer iff the argmax at every
    answer position, teacher-forced on the true answer prefix, is the answer
    token; one forward pass per batch therefore decides the greedy outcome.
    """
    if not samples:
        return np.zeros(0, dtype=bool)
    lengths = {len(s.tokens) for s in samples}
    if len(lengths) != 1:
        raise ValueError("score_batch needs samples of equal length")
    tokens = np.stack([s.tokens for s in samples])
    a0, a1 = samples[0].answer_span
    logits = model(tokens[:, : a1 - 1])
    pred = np.argmax(logits[:, a0 - 1 : a1 - 1], axis=-1)
    return np.all(pred == tokens[:, a0:a1], axis=1)


def score_sample(model: LogitsFn, sample: PasskeySample) -> bool:
    return bool(score_batch(model, [sample])[0])


@dataclass
class GridResult:
    cells: "OrderedDict[tuple[int, float], tuple[int, int]]" = field(default_factory=OrderedDict)

    def accuracy(self, context: int, depth: float) -> float:
        correct, n = self.cells[(context, depth)]
        return 100.0 * correct / n if n else 0.0

    @property
    def contexts(self) -> list[int]:
        return sorted({c for c, _ in self.cells})

    @property
    def depths(self) -> list[float]:
        return sorted({d for _, d in self.cells})

    def mean_accuracy(self, contexts: Sequence[int]) -> float:
        keys = [k for k in self.cells if k[0] in set(contexts)]
        if not keys:
            return 0.0
        return float(np.mean([self.accuracy(*k) for k in keys]))

    def to_csv(self) -> str:
        lines = ["context_length,depth,accuracy,n"]
        for (c, d), (correct, n) in self.cells.items():
            lines.append(f"{c},{d!r},{self.accuracy(c, d)!r},{n}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Compact layout: one row per context, depth accuracies joined by '/'."""
        lines = ["context_length," + "/".join(f"{int(round(d * 100))}%" for d in self.depths)]
        for c in self.contexts:
            cells = [f"{self.accuracy(c, d):.0f}" for d in self.depths if (c, d) in self.cells]
            lines.append(f"{c}," + "/".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> GridResult:
        res = cls()
        for line in text.strip().splitlines()[1:]:
            c, d, acc, n = line.split(",")
            n = int(n)
            res.cells[(int(c), float(d))] = (int(round(float(acc) * n / 100.0)), n)
        return res


def run_grid(model: LogitsFn, grid: Sequence[PasskeySample], batch_size: int = 16) -> GridResult:
    """Per-cell exact-match accuracy over (context_length, depth)."""
    groups: "OrderedDict[tuple[int, float], list[PasskeySample]]" = OrderedDict()
    for s in grid:
        groups.setdefault((s.context_length, s.needle_depth), []).append(s)
    result = GridResult()
    for key, samples in groups.items():
        correct = 0
        by_len: dict[int, list[PasskeySample]] = {}
        for s in samples:
            by_len.setdefault(len(s.tokens), []).append(s)
        for same in by_len.values():
            for i in range(0, len(same), batch_size):
                correct += int(score_batch(model, same[i : i + batch_size]).sum())
        result.cells[key] = (correct, len(samples))
    return result


def write_results(result: GridResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "passkey.csv").write_text(result.to_csv())
    (out / "passkey_table.csv").write_text(result.to_table())
    return out / "passkey.csv"


DESK_SEGMENT = 64
DESK_EVAL_CONTEXTS = tuple(m * DESK_SEGMENT for m in (1, 2, 4, 8, 16))
DESK_EVAL_DEPTHS = EVAL_DEPTHS
