"""Dense-tensor numeric kernel with reverse-mode automatic differentiation.

Everything is backed by numpy arrays in a run-wide precision (32-bit for
training, 64-bit for verification). The graph is micrograd-style: each
Tensor produced by an operation keeps references to its parents and a
closure that scatters the incoming gradient back to them. All operations
verify that their outputs are finite and raise NonFiniteError otherwise.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_PRECISION = 32
_DTYPES = {32: np.float32, 64: np.float64}


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def set_precision(bits):
    """Select the run-wide float width (32 or 64)."""
    global _PRECISION
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _PRECISION = bits


def get_precision():
    return _PRECISION


def dtype():
    return _DTYPES[_PRECISION]


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction for pure inference."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite values in tensor")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense n-d array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=dtype())
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    # operator sugar; scalars are folded into the closures directly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _make(data, parents, backward):
    """Build a non-leaf tensor; drop the graph if no parent is tracked."""
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward_done = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss):
    """Reverse pass from a scalar loss, populating .grad on tracked leaves.

    Visits the graph in reverse topological order exactly once; a second
    call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already called on this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tracked tensor")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._backward_done = True


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        data = a.data + np.asarray(b, dtype=a.data.dtype)

        def back(g):
            a._accumulate(_unbroadcast(g, a.data.shape))

        return _make(data, (a,), back)

    data = a.data + b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), back)


def mul(a, b):
    if not isinstance(b, Tensor):
        barr = np.asarray(b, dtype=a.data.dtype)
        data = a.data * barr

        def back(g):
            a._accumulate(_unbroadcast(g * barr, a.data.shape))

        return _make(data, (a,), back)

    data = a.data * b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), back)


def scale(a, s):
    return mul(a, float(s))


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), back)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def back(g):
        a._accumulate(np.transpose(g, inv))

    return _make(data, (a,), back)


def reshape(a, shape):
    src = a.data.shape
    data = a.data.reshape(shape)

    def back(g):
        a._accumulate(g.reshape(src))

    return _make(data, (a,), back)


def concatenate(tensors, axis=0):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tuple(tensors), back)


def gather_rows(table, idx):
    """Row lookup table[idx]: idx is an integer array, output idx.shape + table.shape[1:]."""
    idx = np.asarray(idx)
    data = table.data[idx]

    def back(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, *table.data.shape[1:]))
        table._accumulate(acc)

    return _make(data, (table,), back)


def reduce_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(data), (a,), back)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else int(np.prod([a.data.shape[i] for i in axis]))
    return scale(reduce_sum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused nonlinear ops
# ---------------------------------------------------------------------------

def masked_softmax(logits, mask):
    """Softmax over the last axis with boolean mask; masked entries get weight 0.

    Raises on rows with no unmasked entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.data.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: fully masked row")
    neg = np.where(mask, logits.data, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    e = np.where(mask, e, 0.0)
    probs = e / e.sum(axis=-1, keepdims=True)
    probs = probs.astype(logits.data.dtype)

    def back(g):
        dot = (g * probs).sum(axis=-1, keepdims=True)
        logits._accumulate(probs * (g - dot))

    return _make(probs, (logits,), back)


def log_softmax(logits):
    """Numerically stable log-softmax over the last axis."""
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        logits._accumulate(g - probs * g.sum(axis=-1, keepdims=True))

    return _make(out, (logits,), back)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis to mean 0 / variance 1, then affine."""
    if x.ndim < 2:
        raise ShapeError("layer_norm expects at least 2 dims")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data
    n = x.data.shape[-1]

    def back(g):
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - s1 / n - xhat * s2 / n))

    return _make(data, (x, gain, bias), back)


def gelu(x):
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    data = (x.data * cdf).astype(x.data.dtype)
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)

    def back(g):
        x._accumulate(g * (cdf + x.data * pdf))

    return _make(data, (x,), back)


def relu(x):
    data = np.maximum(x.data, 0)

    def back(g):
        x._accumulate(g * (x.data > 0))

    return _make(data, (x,), back)


def dropout(x, rate, rng):
    """Inverted dropout; the caller gates on train mode. Deterministic per rng."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    factor = keep / (1.0 - rate)
    data = x.data * factor

    def back(g):
        x._accumulate(g * factor)

    return _make(data, (x,), back)


def top_k_indices(values, k, axis=-1):
    """Indices of the k largest entries along `axis` (ties broken by lower index).

    Pure selection on raw values; not differentiable by design.
    """
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    if k > arr.shape[axis]:
        raise ShapeError(f"k={k} exceeds axis size {arr.shape[axis]}")
    order = np.argsort(-arr, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)
