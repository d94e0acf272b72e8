"""Small reverse-mode autodiff over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded together
with a closure that maps the output gradient to input gradients.
:func:`backward` replays the tape in reverse.  Outside a tape nothing is
recorded, which is the evaluation path.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(loss, tape)
    >>> w.grad
    array([2., 2., 2.])
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DetachedTensor, EmptyLossMask, NonFiniteValue

_tapes: list["Tape"] = []
_checked = False


def set_checked(flag: bool) -> None:
    """Raise :class:`NonFiniteValue` whenever an op produces NaN or Inf."""
    global _checked
    _checked = bool(flag)


@contextlib.contextmanager
def checked_mode(flag: bool = True):
    prev = _checked
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


class Tensor:
    __slots__ = ("_data", "grad", "requires_grad", "name", "_version")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self._data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._version = 0

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        self._data = np.asarray(value, dtype=self._data.dtype)
        self._version += 1

    def assign_(self, value) -> "Tensor":
        """Overwrite values in place; invalidates tapes that saved this tensor."""
        self._data[...] = value
        self._version += 1
        return self

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def dtype(self):
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return self._data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class _Node:
    __slots__ = ("out", "inputs", "versions", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.versions = tuple(t._version for t in inputs)
        self.vjp = vjp


class Tape:
    """Ordered record of executed ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def op(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``value`` as the output of a differentiable op.

    ``vjp(g)`` must return one gradient (or None) per input, each shaped
    like that input.
    """
    if _checked and not np.all(np.isfinite(value)):
        raise NonFiniteValue("non-finite value produced by forward op")
    out = Tensor(value)
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor, tape: Tape, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for t, v in zip(node.inputs, node.versions):
            if t._version != v:
                raise DetachedTensor(f"{t!r} was modified after being recorded")
        grads = node.vjp(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi
        node.out.grad = None if node.out is not loss else node.out.grad


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return op(-a.data, (a,), lambda g: (-g,))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return op(out, (a,), lambda g: (g / (2 * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return op(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def elu_plus_one(a) -> Tensor:
    """elu(x) + 1, a strictly positive alternative feature nonlinearity."""
    a = as_tensor(a)
    x = a.data
    out = np.where(x > 0, x + 1, np.exp(np.minimum(x, 0))).astype(a.dtype)
    return op(out, (a,), lambda g: (g * np.where(x > 0, 1, out),))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF (no tanh approximation)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    out = (x * cdf).astype(a.dtype)
    return op(out, (a,), lambda g: ((g * (cdf + x * pdf)).astype(a.dtype),))


# shape and reduction


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least two dimensions")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return op(a.data @ b.data, (a, b), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return op(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis, keepdims), float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j) -> Tensor:
    a = as_tensor(a)
    return op(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


# neural-network primitives


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return op(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        d = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return op(out, (x, gain, bias), vjp)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity (same object) when not training."""
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return op(x.data * keep, (x,), lambda g: (g * keep,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return op(table.data[ids], (table,), vjp)


def cross_entropy_masked(logits, labels: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``loss_mask`` is 1."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    m = np.asarray(loss_mask).astype(logits.dtype)
    count = m.sum()
    if count == 0:
        raise EmptyLossMask("no position selected for the loss")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = np.asarray((nll * m).sum() / count, dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1.0, -1)
        return (g * p * (m / count)[..., None],)

    return op(loss, (logits,), vjp)


def mse(pred, target: np.ndarray) -> Tensor:
    pred = as_tensor(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype)
    return mean(diff * diff)
