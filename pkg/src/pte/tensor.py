"""Dense numpy tensors with a reverse-mode gradient tape.

Ops executed while a :class:`Tape` is active, and with at least one input
that requires a gradient, are appended to that tape. ``backward`` walks the
tape in exact reverse order. Outside a tape every op is a plain numpy
computation, which is how teacher passes and decoding run.

Gradients accumulate additively into leaf tensors; callers zero them.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NonFiniteError, ShapeError, UsageError

CHECK_FINITE = True

_TAPES: list[Optional["Tape"]] = []


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Use as a context manager::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._consumed = False

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise UsageError("loss was not recorded on this tape")
        if self._consumed:
            raise UsageError("tape already consumed; reset it before a second backward")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if out.retain:
                out.grad = g.copy() if out.grad is None else out.grad + g
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg
                else:
                    p.grad = np.array(pg, dtype=p.data.dtype) if p.grad is None else p.grad + pg
        self._consumed = True


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording inside an active tape (teacher passes)."""

    def __enter__(self) -> None:
        _TAPES.append(None)

    def __exit__(self, *exc) -> None:
        for i in range(len(_TAPES) - 1, -1, -1):
            if _TAPES[i] is None:
                del _TAPES[i]
                break


class Tensor:
    """An ndarray plus gradient bookkeeping.

    ``retain`` asks backward to store the gradient of a non-leaf tensor in
    ``grad``; the importance scorer uses it on activations.
    """

    __slots__ = ("data", "requires_grad", "grad", "retain", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.retain = False
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError("non-finite value produced by a forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.retain = False
    out._tape = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append((out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2 * g * ad,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (np.where(pos, g, 0).astype(g.dtype, copy=False),))


def masked(p: Tensor, mask: np.ndarray) -> Tensor:
    """Entries where ``mask`` is False become exactly +0.0."""
    zero = p.dtype.type(0)
    return _record(np.where(mask, p.data, zero), (p,), lambda g: (np.where(mask, g, zero),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# -- reductions and shape ------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(np.ascontiguousarray(x.data[idx]), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    ax = axis % xs[0].ndim
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in xs], axis=ax)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=ax)))


def concat_heads(x: Tensor) -> Tensor:
    """[B, H, T, dh] -> [B, T, H*dh]."""
    b, h, t, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, T, H*dh] -> [B, H, T, dh]."""
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation and probabilities -------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(x.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _log_softmax_np(x.data, axis)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        gg = (flat * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gb = flat.sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _record(out, (x, gain, bias), bw)


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise DataError("token ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise DataError(f"token id out of vocabulary of size {v}")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _record(table.data[ids], (table,), bw)


def weighted_nll(logits: Tensor, targets, weights) -> Tensor:
    """``sum_i weights[i] * -log softmax(logits[i])[targets[i]]`` as a scalar.

    Positions with weight 0 may carry any target id (padding).
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    w = np.asarray(weights, dtype=logits.dtype).reshape(-1)
    if t.shape[0] != flat.shape[0] or w.shape[0] != flat.shape[0]:
        raise ShapeError("targets/weights do not match logits positions")
    live = w != 0
    tt = np.where(live, t, 0)
    if live.any() and (tt[live].min() < 0 or tt[live].max() >= v):
        raise DataError("target id out of vocabulary")
    lsm = _log_softmax_np(flat, -1)
    picked = lsm[np.arange(flat.shape[0]), tt]
    out = np.asarray(-(w * picked).sum(), dtype=logits.dtype)
    shape = logits.shape

    def bw(g):
        d = np.exp(lsm)
        d[np.arange(flat.shape[0]), tt] -= 1.0
        d *= (w * g)[:, None]
        return (d.reshape(shape),)

    return _record(out, (logits,), bw)


def soft_cross_entropy(logits: Tensor, probs, weights) -> Tensor:
    """``sum_i weights[i] * -sum_v probs[i, v] log softmax(logits[i])[v]``.

    ``probs`` rows must be distributions; the gradient uses ``sum_v probs = 1``
    so it is exactly zero where ``softmax(logits) == probs``.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    q = np.asarray(probs, dtype=np.float64).reshape(-1, v)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if q.shape != flat.shape or w.shape[0] != flat.shape[0]:
        raise ShapeError("probs/weights do not match logits positions")
    lsm = _log_softmax_np(flat.astype(np.float64), -1)
    out = np.asarray(-(w * (q * lsm).sum(-1)).sum(), dtype=logits.dtype)
    shape = logits.shape

    def bw(g):
        d = (np.exp(lsm) - q) * (w * float(g))[:, None]
        return (d.reshape(shape).astype(logits.dtype),)

    return _record(out, (logits,), bw)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean over non-ignored positions of ``-log softmax(logits)[target]``."""
    t = np.asarray(targets).reshape(-1)
    live = t != ignore_index
    n = int(live.sum())
    if n == 0:
        raise UsageError("cross_entropy: every position is ignored; mean undefined")
    return weighted_nll(logits, t, live / n)


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar loss through the tape that recorded it."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise UsageError("loss is not on a live tape (no Tape active or no grad inputs)")
    loss._tape.backward(loss)
