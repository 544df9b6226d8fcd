"""Memorisation and utility metrics: MA, Overlap_n, EL_n, perplexity, Rep_n, KL distance.

Position conventions: a sequence ``x`` has tokens ``x[0] .. x[T-1]``.  The
prediction for ``x[t]`` comes from the prefix ``x[:t]``.  MA scores
``t = 1 .. T-1`` and EL_n scores prefix lengths ``t = 1 .. T-n``; with a
stride ``m`` only multiples of ``m`` in those ranges are scored.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import IncompatibleCheckpointError, InvalidArgumentError
from .model import TinyLM, greedy_decode_batch
from .tensor import _log_softmax_np, kl_rows

REPORT_FIELDS = ("split", "ma", "el3", "ppl", "rep3", "kl_ref", "method", "strength", "step", "seed")


@dataclass(frozen=True)
class MetricsConfig:
    n_gram: int = 3
    stride: int = 8
    max_new_tokens: int | None = None
    gen_mode: str = "greedy"
    # EL/Rep need one greedy decode per scored prefix; cap the sequences per split
    max_gen_sequences: int | None = 64

    def __post_init__(self):
        if self.n_gram < 1:
            raise InvalidArgumentError("n_gram must be >= 1")
        if self.stride < 1:
            raise InvalidArgumentError("stride must be >= 1")
        if self.gen_mode != "greedy":
            raise InvalidArgumentError("only greedy generation is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    return arr[None, :] if arr.ndim == 1 else arr


def ma_positions(seq_len: int, stride: int = 1) -> np.ndarray:
    return np.arange(stride, seq_len, stride)


def el_positions(seq_len: int, n: int, stride: int = 1) -> np.ndarray:
    return np.arange(stride, seq_len - n + 1, stride)


def memorization_accuracy_batch(model: TinyLM, tokens, stride: int = 1) -> np.ndarray:
    """Per-sequence MA for a ``[N, T]`` batch, from a single forward pass."""
    tokens = _as_batch(tokens)
    if tokens.shape[1] < 2:
        raise InvalidArgumentError("MA needs sequences of length >= 2")
    pos = ma_positions(tokens.shape[1], stride)
    if len(pos) == 0:
        raise InvalidArgumentError("stride leaves no scored positions")
    pred = model.logits(tokens)[:, pos - 1, :].argmax(axis=-1)
    return (pred == tokens[:, pos]).mean(axis=1)


def memorization_accuracy(model: TinyLM, sequence, stride: int = 1) -> float:
    return float(memorization_accuracy_batch(model, sequence, stride)[0])


def ngrams(tokens: Sequence[int], n: int) -> set[tuple[int, ...]]:
    toks = [int(t) for t in tokens]
    return {tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)}


def ngram_overlap(a: Sequence[int], b: Sequence[int], n: int) -> float:
    """|ngrams(a) & ngrams(b)| / |ngrams(a)| with n-grams as sets."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    if len(a) < n:
        raise InvalidArgumentError(f"|a|={len(a)} shorter than n={n}")
    ga = ngrams(a, n)
    return len(ga & ngrams(b, n)) / len(ga)


def greedy_continuations(model: TinyLM, tokens: np.ndarray, prefix_lens: Sequence[int],
                         total_len: int | None = None) -> dict[int, np.ndarray]:
    """Greedy continuation (excluding the prefix) for each prefix length, batched over rows."""
    tokens = _as_batch(tokens)
    T = tokens.shape[1] if total_len is None else total_len
    out = {}
    for t in prefix_lens:
        full = greedy_decode_batch(model, tokens[:, :t], T - t)
        out[int(t)] = full[:, t:]
    return out


def extraction_likelihood_batch(model: TinyLM, tokens, n: int = 3, stride: int = 1,
                                continuations: dict[int, np.ndarray] | None = None) -> np.ndarray:
    tokens = _as_batch(tokens)
    T = tokens.shape[1]
    if T <= n:
        raise InvalidArgumentError(f"sequence length {T} must exceed n={n}")
    pos = el_positions(T, n, stride)
    if len(pos) == 0:
        raise InvalidArgumentError("stride leaves no scored prefixes")
    if continuations is None:
        continuations = greedy_continuations(model, tokens, pos)
    scores = np.zeros((len(tokens), len(pos)))
    for j, t in enumerate(pos):
        cont = continuations[int(t)]
        for i in range(len(tokens)):
            scores[i, j] = ngram_overlap(cont[i], tokens[i, t:], n)
    return scores.mean(axis=1)


def extraction_likelihood(model: TinyLM, sequence, n: int = 3, stride: int = 1) -> float:
    return float(extraction_likelihood_batch(model, sequence, n, stride)[0])


def token_nll(model: TinyLM, tokens) -> np.ndarray:
    """Per-position NLL of the next token, shape [N, T-1], in float64."""
    tokens = _as_batch(tokens)
    lp = _log_softmax_np(model.logits(tokens)[:, :-1]).astype(np.float64)
    return -np.take_along_axis(lp, tokens[:, 1:, None], axis=-1)[..., 0]


def perplexity(model: TinyLM, sequences) -> float:
    tokens = _as_batch(sequences) if len(sequences) else np.zeros((0, 0))
    if tokens.size == 0:
        raise InvalidArgumentError("perplexity of an empty set")
    nll = float(token_nll(model, tokens).mean())
    # a diverged model can push the mean NLL past what exp can represent
    return math.exp(nll) if nll < 709.0 else float("inf")


def rep_n(tokens: Sequence[int], n: int = 3) -> float:
    """1 - distinct/total n-grams; 0 when there is no n-gram."""
    toks = [int(t) for t in tokens]
    total = len(toks) - n + 1
    if total < 1:
        return 0.0
    return 1.0 - len(ngrams(toks, n)) / total


def log_probs(model: TinyLM, tokens) -> np.ndarray:
    """Log-softmax at every shifted position, [N, T-1, V] float32."""
    return _log_softmax_np(model.logits(_as_batch(tokens))[:, :-1])


def avg_kl_from_logprobs(lp_model: np.ndarray, lp_ref: np.ndarray) -> float:
    return float(kl_rows(lp_model, lp_ref).mean())


def avg_kl_distance(model: TinyLM, reference: TinyLM, sequences, direction: str = "model_ref") -> float:
    """Mean over shifted positions of KL(model || reference) (or the reverse)."""
    if model.config.arch_hash() != reference.config.arch_hash():
        raise IncompatibleCheckpointError("model and reference have different architectures")
    lp_m, lp_r = log_probs(model, sequences), log_probs(reference, sequences)
    if direction == "model_ref":
        return avg_kl_from_logprobs(lp_m, lp_r)
    if direction == "ref_model":
        return avg_kl_from_logprobs(lp_r, lp_m)
    raise InvalidArgumentError(f"unknown KL direction {direction!r}")


@dataclass
class SplitMetrics:
    ma: float
    el_n: float
    ppl: float
    rep_n: float
    kl_to_reference: float | None = None


@dataclass
class MetricsReport:
    splits: dict[str, SplitMetrics]
    method: str = "base"
    strength: float = 0.0
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        rows = []
        for split, m in self.splits.items():
            rows.append({"split": split, "ma": m.ma, "el3": m.el_n, "ppl": m.ppl, "rep3": m.rep_n,
                         "kl_ref": m.kl_to_reference, "method": self.method,
                         "strength": self.strength, "step": self.step, "seed": self.seed})
        return rows

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    @classmethod
    def from_records(cls, rows: list[dict]) -> MetricsReport:
        if not rows:
            raise InvalidArgumentError("no records")
        splits = {r["split"]: SplitMetrics(r["ma"], r["el3"], r["ppl"], r["rep3"], r["kl_ref"])
                  for r in rows}
        r0 = rows[0]
        return cls(splits, r0["method"], r0["strength"], r0["step"], r0["seed"])

    def __getitem__(self, split: str) -> SplitMetrics:
        return self.splits[split]


def evaluate_split(model: TinyLM, tokens: np.ndarray, cfg: MetricsConfig,
                   ref_logprobs: np.ndarray | None = None) -> SplitMetrics:
    tokens = _as_batch(tokens)
    T = tokens.shape[1]
    n = cfg.n_gram
    ma = float(memorization_accuracy_batch(model, tokens, cfg.stride).mean())
    ppl = perplexity(model, tokens)

    gen = tokens if cfg.max_gen_sequences is None else tokens[:cfg.max_gen_sequences]
    pos = el_positions(T, n, cfg.stride)
    prompt_len = T // 2
    n_new = cfg.max_new_tokens or (T - prompt_len)
    conts = greedy_continuations(model, gen, sorted(set(pos.tolist())))
    el = float(extraction_likelihood_batch(model, gen, n, cfg.stride, continuations=conts).mean())
    if prompt_len in conts and n_new == T - prompt_len:
        rep_cont = conts[prompt_len]
    else:
        rep_cont = greedy_continuations(model, gen, [prompt_len], total_len=prompt_len + n_new)[prompt_len]
    rep = float(np.mean([rep_n(row, n) for row in rep_cont]))

    kl = None
    if ref_logprobs is not None:
        kl = avg_kl_from_logprobs(log_probs(model, tokens), ref_logprobs)
    return SplitMetrics(ma=ma, el_n=el, ppl=ppl, rep_n=rep, kl_to_reference=kl)


def evaluate(model: TinyLM, splits: dict[str, np.ndarray], cfg: MetricsConfig,
             reference: TinyLM | None = None, ref_logprobs: dict[str, np.ndarray] | None = None,
             **run_meta) -> MetricsReport:
    """Metrics for every split; KL is measured against ``reference`` when given."""
    if reference is not None:
        model.check_compatible(reference)
        if ref_logprobs is None:
            ref_logprobs = {k: log_probs(reference, v) for k, v in splits.items()}
    out = {}
    for name, toks in splits.items():
        rl = None if ref_logprobs is None else ref_logprobs.get(name)
        out[name] = evaluate_split(model, toks, cfg, ref_logprobs=rl)
    return MetricsReport(out, **run_meta)
