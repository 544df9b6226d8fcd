"""Synthetic forget/retain corpora with ground-truth key-token masks.

Token ids are split into two alphabets.  The lower quarter ``[0, C)`` is the
*common* alphabet used by a fixed random Markov source of order
``grammar_order``; the rest ``[C, V)`` is the *rare* alphabet used only for
payload spans inside forget records.  Every forget record opens with a
payload span, so each evaluated position of a forget record has a rare token
somewhere in its context.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InvalidArgumentError

SPAN_LEN = 4
BRANCHING = 3
# successor probabilities of the Markov source, most likely first
SUCCESSOR_PROBS = (0.85, 0.1, 0.05)
# forget backgrounds follow the low-probability branches only, so they must be
# memorised rather than predicted from the shared grammar
FORGET_TAIL = True


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 256
    seq_len: int = 64
    n_forget: int = 32
    n_retain: int = 256
    entity_density: float = 0.2
    seed: int = 0
    grammar_order: int = 2

    def __post_init__(self):
        if self.n_forget < 1 or self.n_retain < 1:
            raise InvalidArgumentError("n_forget and n_retain must be >= 1")
        if not 0.0 <= self.entity_density < 1.0:
            raise InvalidArgumentError("entity_density must lie in [0, 1)")
        if self.grammar_order < 1:
            raise InvalidArgumentError("grammar_order must be >= 1")
        if self.seq_len < max(2, self.grammar_order + 1):
            raise InvalidArgumentError("seq_len too short for the grammar order")
        if self.common_size < BRANCHING or self.vocab_size - self.common_size < 2:
            raise InvalidArgumentError(
                f"vocab_size={self.vocab_size} too small to partition common/rare alphabets")

    @property
    def common_size(self) -> int:
        return self.vocab_size // 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CorpusConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class SequenceRecord:
    tokens: list[int]
    split: str
    key_mask: list[bool]
    request_id: int | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.key_mask):
            raise InvalidArgumentError("key_mask length must equal tokens length")
        if self.split not in ("forget", "retain"):
            raise InvalidArgumentError(f"unknown split {self.split!r}")

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens, "split": self.split,
                           "key_mask": self.key_mask, "request_id": self.request_id})

    @classmethod
    def from_json(cls, line: str) -> SequenceRecord:
        d = json.loads(line)
        return cls(tokens=[int(t) for t in d["tokens"]], split=d["split"],
                   key_mask=[bool(m) for m in d["key_mask"]], request_id=d.get("request_id"))


class MarkovSource:
    """Order-k source over ``[0, n_symbols)`` with a sparse successor table."""

    def __init__(self, n_symbols: int, order: int, rng: np.random.Generator):
        self.n_symbols = n_symbols
        self.order = order
        n_ctx = n_symbols ** order
        self.successors = np.stack([rng.choice(n_symbols, BRANCHING, replace=False)
                                    for _ in range(n_ctx)])
        self.probs = np.asarray(SUCCESSOR_PROBS)

    def _ctx_index(self, ctx) -> int:
        idx = 0
        for tok in ctx:
            idx = idx * self.n_symbols + int(tok)
        return idx

    def sample(self, length: int, rng: np.random.Generator, tail: bool = False) -> np.ndarray:
        """Draw a sequence; ``tail=True`` never takes the most likely successor."""
        probs = self.probs
        if tail:
            probs = np.concatenate([[0.0], probs[1:] / probs[1:].sum()])
        out = np.empty(length, dtype=np.int64)
        k = min(self.order, length)
        out[:k] = rng.integers(0, self.n_symbols, size=k)
        for t in range(k, length):
            row = self._ctx_index(out[t - self.order:t])
            out[t] = self.successors[row, rng.choice(BRANCHING, p=probs)]
        return out


def _payload_positions(seq_len: int, density: float, rng: np.random.Generator) -> np.ndarray:
    n_payload = int(round(density * seq_len))
    if density <= 0 or n_payload == 0:
        return np.zeros(seq_len, dtype=bool)
    mask = np.zeros(seq_len, dtype=bool)
    n_spans = max(1, int(np.ceil(n_payload / SPAN_LEN)))
    mask[:min(SPAN_LEN, n_payload)] = True
    remaining = n_payload - int(mask.sum())
    # further spans start on a coarse grid so they never touch each other
    starts = np.arange(SPAN_LEN + 1, seq_len - 1, SPAN_LEN + 1)
    chosen = rng.choice(starts, size=min(n_spans - 1, len(starts)), replace=False) if n_spans > 1 else []
    for s in sorted(chosen):
        if remaining <= 0:
            break
        length = min(SPAN_LEN, remaining, seq_len - s)
        mask[s:s + length] = True
        remaining -= length
    return mask


def generate_corpus(cfg: CorpusConfig) -> list[SequenceRecord]:
    """Forget records first, then retain records; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    C = cfg.common_size
    source = MarkovSource(C, cfg.grammar_order, rng)
    records = []
    for _ in range(cfg.n_forget):
        toks = source.sample(cfg.seq_len, rng, tail=FORGET_TAIL)
        mask = _payload_positions(cfg.seq_len, cfg.entity_density, rng)
        toks[mask] = rng.integers(C, cfg.vocab_size, size=int(mask.sum()))
        records.append(SequenceRecord(toks.tolist(), "forget", mask.tolist()))
    for _ in range(cfg.n_retain):
        toks = source.sample(cfg.seq_len, rng)
        records.append(SequenceRecord(toks.tolist(), "retain", [False] * cfg.seq_len))
    return records


def split_records(records: Iterable[SequenceRecord]) -> tuple[list[SequenceRecord], list[SequenceRecord]]:
    forget, retain = [], []
    for r in records:
        (forget if r.split == "forget" else retain).append(r)
    return forget, retain


def split_sequential(forget_records: list[SequenceRecord], k: int) -> list[list[SequenceRecord]]:
    """Partition into ``k`` contiguous folds whose sizes differ by at most one."""
    n = len(forget_records)
    if k < 1 or k > n:
        raise InvalidArgumentError(f"need 1 <= k <= {n}, got k={k}")
    base, extra = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        fold = [SequenceRecord(r.tokens, r.split, r.key_mask, request_id=i)
                for r in forget_records[start:start + size]]
        folds.append(fold)
        start += size
    return folds


def to_arrays(records: list[SequenceRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into ``(tokens [N, T] int64, key_mask [N, T] bool)``."""
    if not records:
        raise InvalidArgumentError("no records")
    toks = np.asarray([r.tokens for r in records], dtype=np.int64)
    mask = np.asarray([r.key_mask for r in records], dtype=bool)
    return toks, mask


def save_corpus(records: list[SequenceRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def load_corpus(path: str | Path) -> list[SequenceRecord]:
    with open(path) as f:
        return [SequenceRecord.from_json(line) for line in f if line.strip()]
