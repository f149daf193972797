"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy buffers (float32 by default, float64 in verification mode).
Differentiable ops record themselves on the active ``Tape``; ``Tape.backward``
replays the records in exact reverse execution order and accumulates
gradients additively into every ``requires_grad`` leaf.

With no active tape, ops are plain numpy computations (inference mode).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError

LOG_EPS = 1e-12  # clamp for log/division at extreme probabilities
MASK_LOGIT = -1e9  # additive pre-softmax constant for masked attention keys

_state = threading.local()

_default_dtype = np.float32


def default_dtype():
    return _default_dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (float64 for verification runs)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """A dense n-dimensional array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as non-grad constants
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _t(arr):
    """Wrap a freshly computed array without dtype coercion or copy."""
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    return out


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops executed inside are recorded. Tapes are
    per-thread and may nest (the innermost records). Each concurrent forward
    pass needs its own tape.
    """

    def __init__(self):
        self.records = []  # (out, inputs, vjp) in execution order
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        """Populate ``grad`` on every requires_grad leaf reachable from loss."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("backward expects a scalar Tensor loss")
        if not self.records:
            raise ContractError("backward on an empty tape")
        grads = {id(loss): np.ones_like(loss.data)}
        tensors = {id(loss): loss}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                tensors[key] = inp
                acc = grads.get(key)
                grads[key] = gi if acc is None else acc + gi
        # whatever is left was never produced by a recorded op: a leaf
        for key, g in grads.items():
            t = tensors.get(key)
            if t is not None and t.requires_grad:
                t.grad = g.astype(t.data.dtype, copy=False) if t.grad is None else t.grad + g


def backward(tape, loss):
    """Run reverse-mode differentiation of ``loss`` over ``tape``."""
    tape.backward(loss)


def _record(out, inputs, vjp):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, vjp))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g down to ``shape`` (trailing-axis broadcast rules)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    out = _t(a.data + b.data)
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.shape) if ra else None,
                _unbroadcast(g, b.shape) if rb else None)

    return _record(out, (a, b), vjp)


def sub(a, b):
    out = _t(a.data - b.data)
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.shape) if ra else None,
                _unbroadcast(-g, b.shape) if rb else None)

    return _record(out, (a, b), vjp)


def mul(a, b):
    out = _t(a.data * b.data)
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if ra else None,
                _unbroadcast(g * a.data, b.shape) if rb else None)

    return _record(out, (a, b), vjp)


def div(a, b):
    out = _t(a.data / b.data)
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape) if ra else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if rb else None)

    return _record(out, (a, b), vjp)


def neg(a):
    out = _t(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def relu(a):
    out = _t(np.maximum(a.data, 0))
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp)


def exp(a):
    y = np.exp(a.data)
    out = _t(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a):
    """Natural log with the inputs clamped at LOG_EPS."""
    x = np.maximum(a.data, LOG_EPS)
    out = _t(np.log(x))
    return _record(out, (a,), lambda g: (g / x,))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    y = np.where(a.data >= 0, y, 1.0 - y)
    out = _t(y.astype(a.data.dtype, copy=False))

    def vjp(g):
        return (g * out.data * (1.0 - out.data),)

    return _record(out, (a,), vjp)


def softplus(a):
    """log(1 + exp(x)), computed in the overflow-safe form."""
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    out = _t(y.astype(x.dtype, copy=False))

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(x)))
        s = np.where(x >= 0, s, 1.0 - s)
        return (g * s,)

    return _record(out, (a,), vjp)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero outside the interval."""
    out = _t(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return _record(out, (a,), vjp)


def square(a):
    out = _t(a.data * a.data)
    return _record(out, (a,), lambda g: (g * (2.0 * a.data),))


# ---------------------------------------------------------------------------
# reductions and softmax

def tsum(a, axis=None, keepdims=False):
    out = _t(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)

    return _record(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    out = _t(a.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype, copy=False),)

    return _record(out, (a,), vjp)


def softmax(a, axis=-1):
    """Stable softmax along ``axis`` (max-subtracted before exponentiation)."""
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _t(y.astype(x.dtype, copy=False))

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((y * (g - dot)).astype(x.dtype, copy=False),)

    return _record(out, (a,), vjp)


def logsumexp(a, axis=-1, keepdims=False):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = m + np.log(s)
    if not keepdims:
        y = np.squeeze(y, axis=axis)
    out = _t(y.astype(x.dtype, copy=False))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((g * (e / s)).astype(x.dtype, copy=False),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape):
    out = _t(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _t(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape):
    shape = tuple(shape)
    out = _t(np.broadcast_to(a.data, shape).copy())
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis=0):
    out = _t(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    req = [t.requires_grad for t in tensors]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if r else None for p, r in zip(parts, req))

    return _record(out, tuple(tensors), vjp)


def getitem(a, key):
    """Basic slicing (slices/ints/newaxis); gradient scatters back."""
    out = _t(a.data[key])

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _record(out, (a,), vjp)


def reverse(a, axis):
    out = _t(np.flip(a.data, axis=axis).copy())
    return _record(out, (a,), lambda g: (np.flip(g, axis=axis),))


def take_rows(a, idx):
    """Per-batch row gather: a[B, n, d], idx[B] -> out[B, 1, d]."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ContractError(f"take_rows: index shape {idx.shape} does not match batch {a.shape[0]}")
    bidx = np.arange(a.shape[0])
    out = _t(a.data[bidx, idx][:, None, :])

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, (bidx, idx), g[:, 0, :])
        return (full,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# contraction

def matmul(a, b):
    """Batched matrix product with numpy broadcasting on leading axes."""
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _t(a.data @ b.data)
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if ra:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if rb:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _record(out, (a, b), vjp)


def linear(x, w, b=None):
    """x[..., d_in] @ w[d_in, d_out] (+ b), flattened to one GEMM call."""
    lead = x.shape[:-1]
    h = matmul(reshape(x, (-1, x.shape[-1])), w)
    h = reshape(h, lead + (w.shape[-1],))
    if b is not None:
        h = add(h, b)
    return h
