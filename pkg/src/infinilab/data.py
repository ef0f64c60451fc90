"""Byte tokenizer, synthetic pretraining corpus, and passkey datasets.

Passkey sample layout (all byte tokens)::

    [ filler ... "passkey=12345. " ... filler ][ "\\npasskey=" ][ "12345" ]
    |<------------- context_length ---------->|<-- query -->|<- answer ->|

The needle starts at ``floor(depth * (context_length - len(needle)))``.
Filler is a repeated distractor paragraph with no digits, so the key occurs
exactly once in the haystack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259

NEEDLE_TEMPLATE = "passkey={key}. "
QUERY_TEXT = "\npasskey="
FILLER_TEXT = (
    "the grass is green. the sky is blue. the sun is yellow. "
    "here we go. there and back again. "
)

# seed streams; fine-tune and eval never share one
FINETUNE_STREAM = 1
EVAL_STREAM = 2
CORPUS_STREAM = 3

FULL_EVAL_CONTEXTS = (1024, 2048, 4096, 8192, 16384, 32768)
EVAL_DEPTHS = (0.0, 0.25, 0.5, 0.75, 1.0)
FINETUNE_DEPTHS = tuple(round(0.1 * i, 1) for i in range(11))


def tokenize(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(ids: Iterable[int], errors: str = "replace") -> str:
    return detokenize_bytes(ids).decode("utf-8", errors=errors)


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    """Special tokens are dropped; byte ids map back to themselves."""
    return bytes(int(i) for i in ids if 0 <= int(i) < 256)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ------------------------------------------------------------------- corpus


@dataclass
class CorpusSpec:
    num_documents: int = 2000
    median_length: float = 40.0
    mean_length: float = 42.0
    min_length: int = 8
    max_length: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.mean_length < self.median_length:
            raise ValueError("a log-normal length model needs mean >= median")

    @property
    def sigma(self) -> float:
        # log-normal: median = e^mu, mean = e^(mu + sigma^2/2)
        return float(np.sqrt(2.0 * np.log(self.mean_length / self.median_length)))


_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
_CONNECTIVES = ["the", "a", "of", "and", "to", "in", "with", "for", "is", "was", "on", "by"]


def _lexicon(rng: np.random.Generator, size: int = 400) -> list[str]:
    words = set()
    while len(words) < size:
        n = int(rng.integers(1, 4))
        words.add("".join(rng.choice(_SYLLABLES, size=n)))
    return sorted(words)


def _document_text(rng: np.random.Generator, lexicon: list[str], length: int) -> str:
    # Each document has a topic entity and a number that keep coming back, the
    # way names and figures recur in real text; repeats are what teach copying.
    entities = list(rng.choice(lexicon, size=2, replace=False))
    number = "".join(str(d) for d in rng.integers(0, 10, size=int(rng.integers(3, 7))))
    parts: list[str] = []
    size = 0
    while size < length:
        sentence = []
        for _ in range(int(rng.integers(3, 8))):
            r = rng.random()
            if r < 0.2:
                sentence.append(str(rng.choice(_CONNECTIVES)))
            elif r < 0.4:
                sentence.append(str(rng.choice(entities)))
            elif r < 0.65:
                sentence.append(number)
            else:
                sentence.append(str(rng.choice(lexicon)))
        text = " ".join(sentence) + ". "
        parts.append(text)
        size += len(text)
    return "".join(parts)[:length]


def generate_corpus(spec: CorpusSpec) -> list[np.ndarray]:
    """Token documents whose lengths follow a log-normal with the requested median/mean."""
    rng = np.random.default_rng(derive_seed(spec.seed, CORPUS_STREAM))
    lexicon = _lexicon(rng)
    lengths = rng.lognormal(np.log(spec.median_length), spec.sigma, size=spec.num_documents)
    lengths = np.clip(np.round(lengths), spec.min_length, spec.max_length).astype(int)
    return [tokenize(_document_text(rng, lexicon, int(n))) for n in lengths]


def pack_batch(docs: Sequence[np.ndarray], batch_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    """Windows of ``seq_len + 1`` tokens cut from the EOS-joined document stream.

    Documents are packed back to back with no cross-document masking.
    """
    stream = _joined(docs)
    if stream.size < seq_len + 1:
        reps = (seq_len + 1) // stream.size + 1
        stream = np.tile(stream, reps)
    starts = rng.integers(0, stream.size - seq_len, size=batch_size)
    return np.stack([stream[s : s + seq_len + 1] for s in starts])


_JOIN_CACHE: dict[int, tuple[Sequence[np.ndarray], np.ndarray]] = {}


def _joined(docs: Sequence[np.ndarray]) -> np.ndarray:
    hit = _JOIN_CACHE.get(id(docs))
    if hit is not None and hit[0] is docs:
        return hit[1]
    pieces = []
    for d in docs:
        pieces.append(np.asarray(d, dtype=np.int64))
        pieces.append(np.array([EOS_ID], dtype=np.int64))
    stream = np.concatenate(pieces) if pieces else np.array([EOS_ID], dtype=np.int64)
    _JOIN_CACHE.clear()
    _JOIN_CACHE[id(docs)] = (docs, stream)
    return stream


# ------------------------------------------------------------------ passkey


@dataclass
class PasskeySample:
    tokens: np.ndarray
    needle_depth: float
    context_length: int
    answer: np.ndarray
    answer_span: tuple[int, int]
    needle_start: int = 0

    @property
    def prompt(self) -> np.ndarray:
        return self.tokens[: self.answer_span[0]]

    def to_record(self) -> dict:
        return {
            "tokens": [int(t) for t in self.tokens],
            "depth": float(self.needle_depth),
            "context_length": int(self.context_length),
            "answer": [int(t) for t in self.answer],
            "answer_span": [int(self.answer_span[0]), int(self.answer_span[1])],
            "needle_start": int(self.needle_start),
        }

    @classmethod
    def from_record(cls, rec: dict) -> PasskeySample:
        return cls(
            tokens=np.asarray(rec["tokens"], dtype=np.int64),
            needle_depth=float(rec["depth"]),
            context_length=int(rec["context_length"]),
            answer=np.asarray(rec["answer"], dtype=np.int64),
            answer_span=(int(rec["answer_span"][0]), int(rec["answer_span"][1])),
            needle_start=int(rec.get("needle_start", 0)),
        )


def needle_length(key_digits: int = 5) -> int:
    return len(NEEDLE_TEMPLATE.format(key="0" * key_digits))


def make_passkey_sample(context_length: int, depth: float, key_digits: int | str = 5, seed: int = 0) -> PasskeySample:
    """One haystack of ``context_length`` tokens with the needle at ``depth``.

    ``key_digits`` is either a digit count (key drawn from ``seed``) or the key itself.
    """
    if not 0.0 <= depth <= 1.0:
        raise ValueError(f"depth must be in [0, 1], got {depth}")
    rng = np.random.default_rng(seed)
    if isinstance(key_digits, str):
        if not key_digits.isdigit():
            raise ValueError("passkey must consist of digits")
        key = key_digits
    else:
        key = "".join(str(d) for d in rng.integers(0, 10, size=int(key_digits)))
    needle = NEEDLE_TEMPLATE.format(key=key)
    if context_length < len(needle):
        raise ValueError(f"context_length {context_length} cannot hold a {len(needle)}-token needle")

    fill_len = context_length - len(needle)
    offset = int(rng.integers(0, len(FILLER_TEXT)))
    reps = (offset + fill_len) // len(FILLER_TEXT) + 1
    filler = (FILLER_TEXT * reps)[offset : offset + fill_len]
    start = int(np.floor(depth * fill_len))
    haystack = filler[:start] + needle + filler[start:]

    answer = tokenize(key)
    tokens = np.concatenate([tokenize(haystack), tokenize(QUERY_TEXT), answer])
    a0 = context_length + len(QUERY_TEXT)
    return PasskeySample(tokens, float(depth), int(context_length), answer, (a0, a0 + len(key)), start)


def make_eval_grid(
    context_lengths: Sequence[int],
    depths: Sequence[float] = EVAL_DEPTHS,
    samples_per_cell: int = 10,
    seed: int = 0,
    key_digits: int = 5,
) -> list[PasskeySample]:
    """Samples ordered by (context, depth, index); seeds drawn from the eval stream."""
    grid = []
    for c in context_lengths:
        for d in depths:
            for j in range(samples_per_cell):
                s = derive_seed(seed, EVAL_STREAM, int(c), int(round(d * 1000)), j)
                grid.append(make_passkey_sample(int(c), float(d), key_digits, s))
    return grid


def make_finetune_samples(
    n: int,
    context_lengths: Sequence[int],
    seed: int = 0,
    depths: Sequence[float] = FINETUNE_DEPTHS,
    key_digits: int = 5,
    offset: int = 0,
) -> list[PasskeySample]:
    """``n`` fine-tuning samples with needles at 10% depth increments."""
    out = []
    for j in range(offset, offset + n):
        rng = np.random.default_rng(derive_seed(seed, FINETUNE_STREAM, j))
        c = int(rng.choice(context_lengths))
        d = float(rng.choice(depths))
        out.append(make_passkey_sample(c, d, key_digits, derive_seed(seed, FINETUNE_STREAM, j, 1)))
    return out


def pad_samples(samples: Sequence[PasskeySample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs, targets and an answer-only loss mask for teacher forcing."""
    width = max(len(s.tokens) for s in samples) - 1
    inputs = np.full((len(samples), width), PAD_ID, dtype=np.int64)
    targets = np.full((len(samples), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(samples), width), dtype=bool)
    for i, s in enumerate(samples):
        n = len(s.tokens) - 1
        inputs[i, :n] = s.tokens[:-1]
        targets[i, :n] = s.tokens[1:]
        a0, a1 = s.answer_span
        mask[i, a0 - 1 : a1 - 1] = True
    return inputs, targets, mask


# -------------------------------------------------------------------- files


def write_samples(path: str | Path, samples: Iterable[PasskeySample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def read_samples(path: str | Path) -> list[PasskeySample]:
    with open(path) as fh:
        return [PasskeySample.from_record(json.loads(line)) for line in fh if line.strip()]


def write_corpus(path: str | Path, docs: Iterable[np.ndarray]) -> None:
    with open(path, "w") as fh:
        for d in docs:
            fh.write(json.dumps({"tokens": [int(t) for t in d]}, separators=(",", ":")) + "\n")


def read_corpus(path: str | Path) -> list[np.ndarray]:
    with open(path) as fh:
        return [np.asarray(json.loads(line)["tokens"], dtype=np.int64) for line in fh if line.strip()]
