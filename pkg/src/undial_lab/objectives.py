"""Direct-tuning unlearning losses: UNDIAL, focused UNDIAL, GA, NPO and retain regularizers.

All sequence losses take full-length ``[B, T, V]`` logits and ``[B, T]``
token ids and apply the causal shift themselves: logits at position ``t``
are scored against the token at ``t + 1``.  Reference/teacher logits are
constants (numpy arrays or detached tensors).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import InvalidArgumentError, ShapeError
from .model import TinyLM
from .tensor import Tensor, _log_softmax_np, _softmax_np


class Method(str, Enum):
    UNDIAL = "undial"
    FUNDIAL = "fundial"
    GA = "ga"
    NPO = "npo"


class RetainReg(str, Enum):
    NONE = "none"
    GDR = "gdr"
    KLR = "klr"


NPO_DEFAULT_BETA = 0.1


def _coerce(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(str(value).lower())
    except ValueError:
        raise InvalidArgumentError(f"unknown {enum_cls.__name__} {value!r}") from None


@dataclass
class UnlearnSpec:
    method: Method = Method.UNDIAL
    strength: float = 10.0
    retain_reg: RetainReg = RetainReg.NONE
    retain_weight: float = 1.0
    steps: int = 200
    learning_rate: float = 1e-4

    def __post_init__(self):
        self.method = _coerce(Method, self.method)
        self.retain_reg = _coerce(RetainReg, self.retain_reg or "none")
        if self.strength <= 0:
            raise InvalidArgumentError("strength must be > 0")
        if self.steps < 1:
            raise InvalidArgumentError("steps must be >= 1")
        if self.retain_weight < 0:
            raise InvalidArgumentError("retain_weight must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["retain_reg"] = self.retain_reg.value
        return d


class TeacherSnapshot:
    """Frozen copy of a model taken before unlearning starts."""

    def __init__(self, model: TinyLM):
        self.model = model.copy()
        for p in self.model.params.values():
            p.requires_grad = False

    @property
    def config(self):
        return self.model.config

    def logits(self, tokens) -> np.ndarray:
        return self.model.logits(tokens)


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_pair(student: Tensor, other: np.ndarray, targets: np.ndarray) -> None:
    if student.ndim != 3:
        raise ShapeError(f"logits must be [B, T, V], got {student.shape}")
    if other is not None and other.shape != student.shape:
        raise ShapeError(f"logit shapes differ: {student.shape} vs {other.shape}")
    if targets.shape != student.shape[:2]:
        raise ShapeError(f"targets {targets.shape} do not match logits {student.shape[:2]}")
    if student.shape[1] < 2:
        raise ShapeError("need at least two positions for the causal shift")


def adjust_logits(logits_row, target_id: int, gamma: float) -> np.ndarray:
    """Copy of ``logits_row`` with ``gamma`` subtracted at ``target_id``."""
    row = np.array(_const(logits_row), copy=True)
    if not 0 <= int(target_id) < row.shape[-1]:
        raise InvalidArgumentError(f"target_id {target_id} outside [0, {row.shape[-1]})")
    if gamma < 0:
        raise InvalidArgumentError("gamma must be >= 0")
    row[int(target_id)] -= gamma
    return row


def adjust_logits_batch(logits: np.ndarray, targets: np.ndarray, gamma: float) -> np.ndarray:
    """Vectorised :func:`adjust_logits` over every row of ``[..., V]``."""
    out = np.array(logits, copy=True)
    np.put_along_axis(out, targets[..., None],
                      np.take_along_axis(out, targets[..., None], axis=-1) - gamma, axis=-1)
    return out


def adjusted_distribution(teacher_logits: np.ndarray, targets: np.ndarray, gamma: float) -> np.ndarray:
    return _softmax_np(adjust_logits_batch(teacher_logits, targets, gamma))


def _weighted_mean(per_pos: Tensor, weights: np.ndarray) -> Tensor:
    total = max(float(weights.sum()), 1.0)
    return (per_pos * weights.astype(per_pos.dtype)).sum() / total


def undial_loss(student_logits: Tensor, teacher_logits, targets, gamma: float, key_mask=None) -> Tensor:
    """Self-distillation onto teacher logits with ``gamma`` taken off each next token.

    With ``key_mask`` only positions whose target token is flagged contribute
    (focused variant); the reduction is a mask-weighted mean either way.
    """
    teacher = _const(teacher_logits)
    targets = np.asarray(targets)
    _check_pair(student_logits, teacher, targets)
    if gamma < 0:
        raise InvalidArgumentError("gamma must be >= 0")
    if key_mask is None:
        weights = np.ones(targets[:, 1:].shape, dtype=student_logits.dtype)
    else:
        key_mask = np.asarray(key_mask)
        if key_mask.shape != targets.shape:
            raise ShapeError(f"key_mask {key_mask.shape} does not match targets {targets.shape}")
        weights = key_mask[:, 1:].astype(student_logits.dtype)
    nxt = targets[:, 1:]
    p_adj = adjusted_distribution(teacher[:, :-1], nxt, gamma).astype(student_logits.dtype)
    ce = T.cross_entropy_soft(p_adj, student_logits[:, :-1])
    return _weighted_mean(ce, weights)


def fundial_loss(student_logits, teacher_logits, targets, gamma, key_mask) -> Tensor:
    return undial_loss(student_logits, teacher_logits, targets, gamma, key_mask=key_mask)


def token_logprobs(logits: Tensor, targets) -> Tensor:
    """log p(x_{t+1} | x_{<=t}) for every shifted position, shape [B, T-1]."""
    targets = np.asarray(targets)
    return T.gather_last(T.log_softmax(logits[:, :-1]), targets[:, 1:])


def nll_loss(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets)
    _check_pair(logits, None, targets)
    return -token_logprobs(logits, targets).mean()


def ga_objective(logits: Tensor, targets) -> Tensor:
    """Negated mean NLL; minimising it ascends the NLL of ``targets``."""
    targets = np.asarray(targets)
    _check_pair(logits, None, targets)
    return token_logprobs(logits, targets).mean()


def npo_loss(student_logits: Tensor, ref_logits, targets, beta: float = NPO_DEFAULT_BETA) -> Tensor:
    """Mean of ``-(2/beta) log sigmoid(-beta (log p_student - log p_ref))`` per token."""
    ref = _const(ref_logits)
    targets = np.asarray(targets)
    _check_pair(student_logits, ref, targets)
    if beta <= 0:
        raise InvalidArgumentError("beta must be > 0")
    ref_lp = np.take_along_axis(_log_softmax_np(ref[:, :-1]), targets[:, 1:, None], axis=-1)[..., 0]
    log_ratio = token_logprobs(student_logits, targets) - ref_lp.astype(student_logits.dtype)
    return T.log_sigmoid(log_ratio * (-beta)).mean() * (-2.0 / beta)


def kl_regularizer(student_logits: Tensor, ref_logits, targets=None) -> Tensor:
    """Mean over shifted positions of KL(softmax(ref) || softmax(student))."""
    ref = _const(ref_logits)
    if student_logits.shape != ref.shape:
        raise ShapeError(f"logit shapes differ: {student_logits.shape} vs {ref.shape}")
    ref_lp = _log_softmax_np(ref[:, :-1]).astype(np.float64)
    p_ref = np.exp(ref_lp)
    entropy = -(p_ref * ref_lp).sum(axis=-1)
    ce = T.cross_entropy_soft(p_ref.astype(student_logits.dtype), student_logits[:, :-1])
    return (ce - entropy.astype(student_logits.dtype)).mean()


def retain_regularizer(student_logits: Tensor, ref_logits, targets, mode) -> Tensor:
    mode = _coerce(RetainReg, mode)
    if mode is RetainReg.GDR:
        return nll_loss(student_logits, targets)
    if mode is RetainReg.KLR:
        return kl_regularizer(student_logits, ref_logits, targets)
    raise InvalidArgumentError(f"unknown retain regularizer {mode!r}")


def make_objective(spec: UnlearnSpec, teacher: TeacherSnapshot):
    """Build ``objective(model, batch)`` for :func:`undial_lab.model.train_step`.

    ``batch`` is a dict with ``tokens`` and ``key_mask`` for the forget batch
    and, when a retain regularizer is active, ``retain_tokens``.
    """

    def objective(model: TinyLM, batch) -> Tensor:
        toks = batch["tokens"]
        logits = model.forward(toks)
        if spec.method in (Method.UNDIAL, Method.FUNDIAL):
            mask = batch.get("key_mask") if spec.method is Method.FUNDIAL else None
            loss = undial_loss(logits, teacher.logits(toks), toks, spec.strength, key_mask=mask)
        elif spec.method is Method.GA:
            loss = ga_objective(logits, toks)
        elif spec.method is Method.NPO:
            loss = npo_loss(logits, teacher.logits(toks), toks, beta=spec.strength)
        else:  # pragma: no cover - enum is closed
            raise InvalidArgumentError(f"unknown method {spec.method}")
        if spec.retain_reg is not RetainReg.NONE and spec.retain_weight > 0:
            rt = batch["retain_tokens"]
            r_logits = model.forward(rt)
            ref = teacher.logits(rt) if spec.retain_reg is RetainReg.KLR else None
            loss = loss + retain_regularizer(r_logits, ref, rt, spec.retain_reg) * spec.retain_weight
        return loss

    return objective
