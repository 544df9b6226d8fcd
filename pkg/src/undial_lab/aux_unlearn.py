"""Unlearning baselines that lean on an auxiliary model or act at decode time.

* DP: mix the next-token distribution with the uniform distribution.
* TA: subtract a forget-set fine-tuned ("memo") model in weight space.
* CD: subtract memo-model logits before the softmax.

:class:`DecodeTimeModel` wraps the decode-time variants so that every
metric in :mod:`undial_lab.metrics` can score them like a plain model.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import IncompatibleCheckpointError, InvalidArgumentError, ShapeError
from .model import OptimizerState, TinyLM, train_step
from .objectives import nll_loss
from .tensor import Tensor, _log_softmax_np, _softmax_np


class AuxMethod(str, Enum):
    DP = "dp"
    TA = "ta"
    CD_PLAIN = "cd_plain"
    CD_RELU = "cd_relu"


@dataclass
class AuxSpec:
    method: AuxMethod = AuxMethod.CD_RELU
    coeff: float = 0.5
    memo_checkpoint: str | None = None
    ta_mode: str = "delta"
    dp_mode: str = "prob"

    def __post_init__(self):
        if not isinstance(self.method, AuxMethod):
            try:
                self.method = AuxMethod(str(self.method).lower())
            except ValueError:
                raise InvalidArgumentError(f"unknown auxiliary method {self.method!r}") from None
        if self.method is AuxMethod.DP and not 0.0 <= self.coeff <= 1.0:
            raise InvalidArgumentError("DP coefficient must lie in [0, 1]")
        if self.method is not AuxMethod.DP and self.coeff < 0:
            raise InvalidArgumentError("coefficient must be >= 0")

    @property
    def needs_memo(self) -> bool:
        return self.method is not AuxMethod.DP


def dp_decode_probs(logits_row, lam: float, mode: str = "prob") -> np.ndarray:
    """Uniform-mixing decode distribution.

    ``mode="prob"`` returns ``(1 - lam) softmax(z) + lam / V``.  ``mode="literal"``
    evaluates ``softmax((1 - lam) z + lam u)`` with ``u`` the uniform vector,
    which reduces to a temperature change.
    """
    z = np.asarray(logits_row, dtype=np.float64)
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgumentError(f"lambda must lie in [0, 1], got {lam}")
    V = z.shape[-1]
    if mode == "prob":
        return (1.0 - lam) * _softmax_np(z) + lam / V
    if mode == "literal":
        return _softmax_np((1.0 - lam) * z + lam / V)
    raise InvalidArgumentError(f"unknown DP mode {mode!r}")


def contrastive_decode_probs(z, z_memo, alpha: float, form: str = "plain") -> np.ndarray:
    """softmax(z - alpha z_memo) or softmax(z - alpha relu(z_memo - z))."""
    z = np.asarray(z, dtype=np.float64)
    z_memo = np.asarray(z_memo, dtype=np.float64)
    if z.shape != z_memo.shape:
        raise ShapeError(f"logit shapes differ: {z.shape} vs {z_memo.shape}")
    if alpha < 0:
        raise InvalidArgumentError("alpha must be >= 0")
    return _softmax_np(_contrast(z, z_memo, alpha, form))


def _contrast(z, z_memo, alpha, form):
    if form == "plain":
        return z - alpha * z_memo
    if form == "relu":
        return z - alpha * np.maximum(z_memo - z, 0.0)
    raise InvalidArgumentError(f"unknown contrastive form {form!r}")


def task_arithmetic_merge(base: TinyLM, memo: TinyLM, beta: float, mode: str = "delta") -> TinyLM:
    """``raw``: theta - beta * theta_memo.  ``delta``: theta - beta * (theta_memo - theta)."""
    if list(base.params) != list(memo.params):
        raise IncompatibleCheckpointError("parameter names differ between base and memo")
    for name, p in base.params.items():
        if p.shape != memo.params[name].shape:
            raise IncompatibleCheckpointError(f"{name}: shape {p.shape} vs {memo.params[name].shape}")
    if mode not in ("raw", "delta"):
        raise InvalidArgumentError(f"unknown merge mode {mode!r}")
    merged = {}
    for name, p in base.params.items():
        th, tm = p.data, memo.params[name].data
        vec = tm if mode == "raw" else tm - th
        merged[name] = Tensor(th - np.float32(beta) * vec if beta else th.copy(),
                              requires_grad=True, name=name)
    return TinyLM(base.config, merged, meta={**base.meta, "merged": mode, "beta": beta})


def train_memo_model(base: TinyLM, forget_tokens, steps: int, lr: float = 1e-3,
                     batch_size: int = 64, seed: int = 0, log=None) -> TinyLM:
    """Fine-tune a copy of ``base`` on the forget set with plain NLL."""
    forget_tokens = np.asarray(forget_tokens)
    if forget_tokens.size == 0:
        raise InvalidArgumentError("forget set is empty")
    memo = base.copy()
    memo.meta = {**base.meta, "memo": True}
    if steps <= 0:
        return memo
    opt = OptimizerState.for_model(memo, lr=lr)
    rng = np.random.default_rng(seed)
    bs = min(batch_size, len(forget_tokens))
    objective = lambda model, batch: nll_loss(model.forward(batch), batch)  # noqa: E731
    for step in range(steps):
        idx = rng.choice(len(forget_tokens), bs, replace=False)
        _, _, loss = train_step(memo, opt, forget_tokens[idx], objective)
        if log is not None:
            log(step, loss)
    return memo


class DecodeTimeModel:
    """A model whose next-token distribution is transformed at decode time.

    ``logits`` returns log-probabilities of the transformed distribution, so
    argmax, softmax and NLL computed downstream all refer to it.
    """

    def __init__(self, base: TinyLM, spec: AuxSpec, memo: TinyLM | None = None):
        if spec.needs_memo and spec.method is not AuxMethod.TA and memo is None:
            raise InvalidArgumentError(f"{spec.method.value} needs a memo model")
        if memo is not None:
            base.check_compatible(memo)
        self.base, self.memo, self.spec = base, memo, spec
        self.config = base.config

    def check_compatible(self, other) -> None:
        self.base.check_compatible(getattr(other, "base", other))

    def logits(self, tokens, batch_size: int = 64) -> np.ndarray:
        z = self.base.logits(tokens, batch_size)
        if self.spec.method is AuxMethod.DP:
            lam = self.spec.coeff
            if self.spec.dp_mode == "literal":
                return _log_softmax_np((1.0 - lam) * z + lam / z.shape[-1])
            p = (1.0 - lam) * _softmax_np(z.astype(np.float64)) + lam / z.shape[-1]
            return np.log(p).astype(np.float32)
        form = "plain" if self.spec.method is AuxMethod.CD_PLAIN else "relu"
        zm = self.memo.logits(tokens, batch_size)
        return _log_softmax_np(_contrast(z, zm, np.float32(self.spec.coeff), form))

    def forward(self, tokens) -> Tensor:
        return Tensor._wrap(self.logits(tokens))

    __call__ = forward


def build_aux_model(base: TinyLM, spec: AuxSpec, memo: TinyLM | None = None):
    """Model (or decode-time wrapper) implementing ``spec``."""
    if spec.method is AuxMethod.TA:
        if memo is None:
            raise InvalidArgumentError("task arithmetic needs a memo model")
        return task_arithmetic_merge(base, memo, spec.coeff, spec.ta_mode)
    return DecodeTimeModel(base, spec, memo)
