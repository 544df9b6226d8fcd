"""Dense float32 tensors with a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`GradTape` when at
least one input requires a gradient.  Outside a tape every op is a plain numpy
computation, which is what evaluation code relies on for speed.

    >>> x = Tensor([2.0], requires_grad=True)
    >>> y = Tensor([3.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = (x * y).sum()
    >>> backward(tape, loss)
    >>> float(x.grad[0])
    3.0
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, ShapeError

LOG_EPS = 1e-12

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``data`` is stored as float32 unless a float64 dtype is requested
    explicitly (finite-difference checks run in float64).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered log of differentiable operations.

    A tape is rebuilt for every forward pass; recording happens in execution
    order, so every operation's inputs are already on the tape (or are leaves)
    when it is appended.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> GradTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.records.append(_Record(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: GradTape, loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor seen by ``tape``.

    Gradients are assigned, not accumulated.  Tensors on the tape that the
    loss does not depend on receive zeros.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig

    seen: set[int] = set()
    for rec in tape.records:
        for t in (*rec.inputs, rec.out):
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                g = grads.get(id(t))
                t.grad = np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False)
    if loss.requires_grad:
        loss.grad = grads[id(loss)]


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # python scalars/lists become float32 so they never upcast float32 data
    arr = x if isinstance(x, np.ndarray) else np.asarray(x, dtype=np.float32)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return Tensor._wrap(arr)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad / bd, (a, b), bw)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = x2 * (0.044715 * _GELU_C)
    th += _GELU_C
    th *= xd
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 * 0.044715 x^2)
        d = th * th
        np.subtract(1.0, d, out=d)
        d *= xd
        d *= x2 * (3 * 0.044715 * _GELU_C) + _GELU_C
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _emit(out, (x,), bw)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    """Natural log with the input clamped at 1e-12."""
    x = _as_tensor(x)
    clamped = np.maximum(x.data, LOG_EPS)
    live = x.data > LOG_EPS
    return _emit(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0),))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|)), finite for any input."""
    x = _as_tensor(x)
    xd = x.data
    out = np.minimum(xd, 0) - np.log1p(np.exp(-np.abs(xd)))
    # d/dx log sigmoid(x) = sigmoid(-x)
    sig_neg = np.exp(np.minimum(-xd, 0)) / (1.0 + np.exp(-np.abs(xd)))
    return _emit(out.astype(xd.dtype, copy=False), (x,), lambda g: (g * sig_neg,))


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    x = _as_tensor(x)
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape / reductions
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx) -> Tensor:
    """Basic (slice/integer) indexing; the gradient scatters back into zeros."""
    x = _as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _emit(x.data[idx], (x,), bw)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out = ad @ bd

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(out, (a, b), bw)


def embedding(weight, ids) -> Tensor:
    """Row gather ``weight[ids]``; ids must be valid row indices."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise InvalidArgumentError("embedding ids must be integers")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise InvalidArgumentError(f"embedding id out of range [0, {n})")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _emit(weight.data[ids], (weight,), bw)


def gather_last(x, idx) -> Tensor:
    """out[..., ] = x[..., idx[...]] picking one entry of the last axis per row."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match {x.shape[:-1]}")
    sel = idx[..., None]
    out = np.take_along_axis(x.data, sel, axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, sel, g[..., None], axis=-1)
        return (gx,)

    return _emit(out, (x,), bw)


def one_hot(ids, depth: int, dtype=np.float32) -> Tensor:
    """Constant one-hot encoding along a new trailing axis."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= depth):
        raise InvalidArgumentError(f"one_hot id out of range [0, {depth})")
    return Tensor._wrap((ids[..., None] == np.arange(depth)).astype(dtype))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xd = x.data
    d = xd.shape[-1]
    mu = (xd.sum(axis=-1, keepdims=True, dtype=np.float64) / d).astype(xd.dtype)
    xhat = xd - mu
    var = np.einsum("...i,...i->...", xhat, xhat, dtype=np.float64)[..., None] / d
    rstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat *= rstd
    out = xhat * gain.data
    out += bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            c1 = dxhat.mean(axis=-1, keepdims=True)
            c2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dxhat -= c1
            dxhat -= xhat * c2
            dxhat *= rstd
            gx = dxhat
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), bw)


def causal_mask(scores) -> Tensor:
    """Set entries above the diagonal of the trailing [T, T] block to -inf."""
    scores = _as_tensor(scores)
    t_q, t_k = scores.shape[-2:]
    future = np.triu(np.ones((t_q, t_k), dtype=bool), k=1 + (t_k - t_q))
    out = scores.data.copy()
    out[..., future] = -np.inf

    def bw(g):
        g = g.copy()
        g[..., future] = 0
        return (g,)

    return _emit(out, (scores,), bw)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = x - x.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    e *= (1.0 / denom).astype(x.dtype)
    return e


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64))
    shifted -= lse.astype(x.dtype)
    return shifted


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise InvalidArgumentError("softmax of an empty input")
    y = _softmax_np(x.data, axis)

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _emit(y, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise InvalidArgumentError("log_softmax of an empty input")
    y = _log_softmax_np(x.data, axis)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit(y, (x,), bw)


def cross_entropy_soft(target, logits) -> Tensor:
    """Row-wise ``-sum(target * log_softmax(logits))`` over the last axis.

    ``target`` is treated as a constant.  A 1-D input yields a scalar; leading
    dimensions are kept otherwise.
    """
    logits = _as_tensor(logits)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.shape != logits.shape:
        raise ShapeError(f"target shape {tgt.shape} != logits shape {logits.shape}")
    if logits.size == 0:
        raise InvalidArgumentError("cross_entropy_soft of an empty input")
    tgt = tgt.astype(logits.dtype, copy=False)
    logp = _log_softmax_np(logits.data)
    out = -(tgt * logp).sum(axis=-1, dtype=np.float64).astype(logits.dtype)

    def bw(g):
        g = np.asarray(g)[..., None]
        p = np.exp(logp)
        return (g * (p * tgt.sum(axis=-1, keepdims=True) - tgt),)

    return _emit(np.asarray(out), (logits,), bw)


# ---------------------------------------------------------------------------
# plain-array helpers (no tape)
# ---------------------------------------------------------------------------

def kl_divergence(p, q) -> float:
    """KL(p || q) for probability vectors, with 0 * log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shape mismatch {p.shape} vs {q.shape}")
    ratio = np.log(np.maximum(p, LOG_EPS)) - np.log(np.maximum(q, LOG_EPS))
    return float(max(np.sum(np.where(p > 0, p * ratio, 0.0)), 0.0))


def kl_rows(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Per-row KL(p || q) from log-probabilities along the last axis."""
    if logp.shape != logq.shape:
        raise ShapeError(f"kl_rows shape mismatch {logp.shape} vs {logq.shape}")
    p = np.exp(logp.astype(np.float64))
    return np.maximum((p * (logp.astype(np.float64) - logq)).sum(axis=-1), 0.0)
