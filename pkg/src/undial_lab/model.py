"""Tiny decoder-only transformer, greedy decoding and an AdamW training step."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import IncompatibleCheckpointError, InvalidArgumentError, NonFiniteLossError
from .tensor import GradTape, Tensor, backward

ARCH_FIELDS = ("vocab_size", "d_model", "n_layers", "n_heads", "context_len")


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 64
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidArgumentError("vocab_size must be >= 2")
        if self.context_len < 2:
            raise InvalidArgumentError("context_len must be >= 2")
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 0:
            raise InvalidArgumentError("d_model, n_heads must be positive and n_layers >= 0")
        if self.d_model % self.n_heads:
            raise InvalidArgumentError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> LmConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def arch_hash(self) -> str:
        """Hash of the fields that decide parameter shapes."""
        arch = {k: getattr(self, k) for k in ARCH_FIELDS}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def param_shapes(cfg: LmConfig) -> dict[str, tuple[int, ...]]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, d),
        "pos_emb": (cfg.context_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d),
            p + "attn.bq": (d,), p + "attn.bk": (d,), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, 4 * d), p + "mlp.b1": (4 * d,),
            p + "mlp.w2": (4 * d, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, V), "head.b": (V,)})
    return shapes


def init_params(cfg: LmConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape, np.float32)
        elif leaf == "g":
            arr = np.ones(shape, np.float32)
        else:
            arr = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


class TinyLM:
    """Pre-norm GPT-style LM with learned absolute positions and a GELU MLP."""

    def __init__(self, config: LmConfig, params: dict[str, Tensor] | None = None, meta: dict | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.meta = dict(meta or {})
        expected = param_shapes(config)
        if list(self.params) != list(expected):
            raise IncompatibleCheckpointError("parameter names do not match the config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise IncompatibleCheckpointError(
                    f"{name}: shape {self.params[name].shape} != expected {shape}")
        self._dropout_rng = np.random.default_rng(config.seed + 7919)

    def __repr__(self):
        return f"TinyLM({self.config}, n_params={self.n_params()})"

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> TinyLM:
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                  for k, v in self.params.items()}
        return TinyLM(self.config, params, meta=self.meta)

    def check_compatible(self, other: TinyLM) -> None:
        if self.config.arch_hash() != other.config.arch_hash():
            raise IncompatibleCheckpointError(
                f"architecture mismatch: {self.config} vs {other.config}")

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.dtype.kind not in "iu":
            raise InvalidArgumentError("tokens must be an integer matrix [B, T]")
        if tokens.shape[1] > self.config.context_len:
            raise InvalidArgumentError(
                f"sequence length {tokens.shape[1]} exceeds context_len {self.config.context_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise InvalidArgumentError("token id out of range")
        return tokens

    def forward(self, tokens, train: bool = False) -> Tensor:
        """Logits [B, T, V]; position t only sees tokens at positions <= t."""
        tokens = self._check_tokens(tokens)
        cfg, P = self.config, self.params
        B, L = tokens.shape
        H = cfg.n_heads
        dh = cfg.d_model // H
        drop = cfg.dropout if train else 0.0
        scale = 1.0 / math.sqrt(dh)

        x = T.embedding(P["tok_emb"], tokens) + T.embedding(P["pos_emb"], np.arange(L))
        for i in range(cfg.n_layers):
            p = f"blocks.{i}."
            h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

            def heads(w, b):
                return (h @ P[p + w] + P[p + b]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)

            q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk", "attn.bk"), heads("attn.wv", "attn.bv")
            att = T.softmax(T.causal_mask((q @ k.transpose(0, 1, 3, 2)) * scale))
            att = T.dropout(att, drop, self._dropout_rng)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, cfg.d_model)
            x = x + T.dropout(y @ P[p + "attn.wo"] + P[p + "attn.bo"], drop, self._dropout_rng)

            h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            m = T.gelu(h @ P[p + "mlp.w1"] + P[p + "mlp.b1"]) @ P[p + "mlp.w2"] + P[p + "mlp.b2"]
            x = x + T.dropout(m, drop, self._dropout_rng)

        x = T.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        return x @ P["head.w"] + P["head.b"]

    __call__ = forward

    def logits(self, tokens, batch_size: int = 64) -> np.ndarray:
        """Evaluation-only logits as a float32 array, computed in chunks."""
        tokens = self._check_tokens(tokens)
        chunks = [self.forward(tokens[i:i + batch_size]).data
                  for i in range(0, len(tokens), batch_size)]
        return np.concatenate(chunks, axis=0)


def forward(model: TinyLM, tokens) -> Tensor:
    return model.forward(tokens)


def greedy_decode_batch(model: TinyLM, prompts, n_new: int) -> np.ndarray:
    """Greedy continuation of equal-length prompts; ties go to the lowest id."""
    prompts = np.asarray(prompts)
    if prompts.ndim == 1:
        prompts = prompts[None, :]
    if prompts.shape[1] < 1:
        raise InvalidArgumentError("prompt must contain at least one token")
    if n_new < 0:
        raise InvalidArgumentError("n_new must be >= 0")
    if prompts.shape[1] + n_new > model.config.context_len:
        raise InvalidArgumentError(
            f"prompt ({prompts.shape[1]}) + n_new ({n_new}) exceeds context_len {model.config.context_len}")
    seq = prompts.astype(np.int64)
    for _ in range(n_new):
        last = model.logits(seq)[:, -1, :]
        nxt = np.argmax(last, axis=-1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return seq


def greedy_decode(model: TinyLM, prompt, n_new: int) -> list[int]:
    return greedy_decode_batch(model, np.asarray(prompt)[None, :], n_new)[0].tolist()


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: TinyLM, **kw) -> OptimizerState:
        opt = cls(**kw)
        for name, p in model.params.items():
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        return opt


def adamw_update(params: dict[str, Tensor], opt: OptimizerState) -> None:
    """Decoupled-weight-decay Adam step, applied in place."""
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    step_size = opt.lr / (1 - b1 ** t)
    bc2_sqrt = math.sqrt(1 - b2 ** t)
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if opt.weight_decay:
            p.data -= (opt.lr * opt.weight_decay) * p.data
        denom = np.sqrt(v) / bc2_sqrt + opt.eps
        p.data -= step_size * (m / denom)


Objective = Callable[[TinyLM, object], Tensor]


def train_step(model: TinyLM, opt: OptimizerState, batch, objective: Objective):
    """One AdamW step on ``objective(model, batch)``.

    Returns ``(model, opt, loss)`` with the pre-update loss.  Parameters and
    moments are updated in place.  A non-finite loss or gradient raises
    :class:`NonFiniteLossError` before anything is modified.
    """
    with GradTape() as tape:
        loss = objective(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at step {opt.step}",
                                 {"step": opt.step, "loss": value})
    backward(tape, loss)
    bad = [n for n, p in model.params.items()
           if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise NonFiniteLossError(f"non-finite gradient at step {opt.step}",
                                 {"step": opt.step, "loss": value, "params": bad})
    adamw_update(model.params, opt)
    for p in model.params.values():
        p.grad = None
    return model, opt, value
