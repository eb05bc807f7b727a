"""Dense float64 tensors with a reverse-mode gradient tape.

Storage is always C-contiguous float64; slices and transposes copy rather
than alias, which keeps the backward rules trivial to reason about.  Ops
record onto the innermost active `Tape`; with no tape active they are plain
numpy computations.  Gradients accumulate additively into `Tensor.grad`;
callers zero them between optimizer steps.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import _kernels


class Tensor:
    __slots__ = ("array", "requires_grad", "grad")

    def __init__(self, array, requires_grad: bool = False):
        self.array = np.ascontiguousarray(array, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None  # np.ndarray of array's shape once populated

    @property
    def shape(self):
        return self.array.shape

    @property
    def data(self):
        """Flat row-major view of the storage."""
        return self.array.reshape(-1)

    @property
    def size(self):
        return self.array.size

    def item(self) -> float:
        return self.array.reshape(()).item() if self.array.size == 1 else float(self.array)

    def detach(self) -> "Tensor":
        return Tensor(self.array)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.array.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean(self)

    def t(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Node:
    __slots__ = ("op", "inputs", "out", "fn")

    def __init__(self, op, inputs, out, fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.fn = fn


_TAPES: list["Tape"] = []

# Test hook: when set to an op name, that op's backward sees a slightly
# scaled upstream gradient, so gradient checks must flag it.
_CORRUPT_OP: str | None = None


class corrupt_backward:
    """Context manager deliberately breaking one op's backward (tests only)."""

    def __init__(self, op: str):
        self.op = op

    def __enter__(self):
        global _CORRUPT_OP
        _CORRUPT_OP = self.op
        return self

    def __exit__(self, *exc):
        global _CORRUPT_OP
        _CORRUPT_OP = None
        return False


class Tape:
    """Ordered record of differentiable ops; execution order is topological."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, root: Tensor):
        """Accumulate d(root)/d(input) into .grad over the whole tape."""
        if root.array.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if root.grad is None:
            root.grad = np.ones_like(root.array)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            if _CORRUPT_OP is not None and node.op == _CORRUPT_OP:
                g = g * 1.05
            node.fn(g)


class no_grad:
    """Context that suspends tape recording (e.g. frozen-module forwards)."""

    __slots__ = ("_saved",)

    def __enter__(self):
        self._saved = _TAPES[:]
        _TAPES.clear()
        return self

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(op: str, inputs, out: Tensor, fn):
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(Node(op, inputs, out, fn))


def _acc(t: Tensor, g):
    # First contribution copies: g may alias another tensor's grad buffer.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op, a, b, value, da, db):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(value(a.array, b.array))

    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(da(g, a.array, b.array), a.array.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(db(g, a.array, b.array), b.array.shape))

    _record(op, (a, b), out, backward)
    return out


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def maximum(a, b):
    # Ties route the gradient to the first argument.
    def da(g, x, y):
        return g * (x >= y)

    def db(g, x, y):
        return g * (x < y)

    return _binary("maximum", a, b, np.maximum, da, db)


def minimum(a, b):
    def da(g, x, y):
        return g * (x <= y)

    def db(g, x, y):
        return g * (x > y)

    return _binary("minimum", a, b, np.minimum, da, db)


def neg(a):
    a = _as_tensor(a)
    out = Tensor(-a.array)

    def backward(g):
        _acc(a, -g)

    _record("neg", (a,), out, backward)
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.array.ndim != 2 or b.array.ndim != 2 or a.array.shape[1] != b.array.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.array.shape} x {b.array.shape}")
    out = Tensor(a.array @ b.array)

    def backward(g):
        if a.requires_grad:
            _acc(a, g @ b.array.T)
        if b.requires_grad:
            _acc(b, a.array.T @ g)

    _record("matmul", (a, b), out, backward)
    return out


def transpose(a):
    a = _as_tensor(a)
    if a.array.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.array.shape}")
    out = Tensor(a.array.T)

    def backward(g):
        _acc(a, g.T)

    _record("transpose", (a,), out, backward)
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.array.reshape(shape))

    def backward(g):
        _acc(a, g.reshape(a.array.shape))

    _record("reshape", (a,), out, backward)
    return out


def relu(a):
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.array, 0.0))

    def backward(g):
        _acc(a, g * (a.array > 0))

    _record("relu", (a,), out, backward)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    x = a.array
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def backward(g):
        _acc(a, g * s * (1.0 - s))

    _record("sigmoid", (a,), out, backward)
    return out


def log(a):
    a = _as_tensor(a)
    out = Tensor(np.log(a.array))

    def backward(g):
        _acc(a, g / a.array)

    _record("log", (a,), out, backward)
    return out


def clip(a, lo: float, hi: float):
    """Clamp entries to [lo, hi]; gradient passes only strictly inside."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.array, lo, hi))

    def backward(g):
        _acc(a, g * ((a.array > lo) & (a.array < hi)))

    _record("clip", (a,), out, backward)
    return out


def sum_all(a):
    a = _as_tensor(a)
    out = Tensor(a.array.sum())

    def backward(g):
        _acc(a, np.full(a.array.shape, np.asarray(g).item()))

    _record("sum", (a,), out, backward)
    return out


def mean(a):
    a = _as_tensor(a)
    out = Tensor(a.array.mean())
    n = a.array.size

    def backward(g):
        _acc(a, np.full(a.array.shape, np.asarray(g).item() / n))

    _record("mean", (a,), out, backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.array for t in tensors], axis=axis))
    sizes = [t.array.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    _record("concat", tuple(tensors), out, backward)
    return out


def slice_rows(a, lo: int, hi: int):
    a = _as_tensor(a)
    out = Tensor(a.array[lo:hi].copy())

    def backward(g):
        full = np.zeros_like(a.array)
        full[lo:hi] = g
        _acc(a, full)

    _record("slice_rows", (a,), out, backward)
    return out


def slice_cols(a, lo: int, hi: int):
    a = _as_tensor(a)
    out = Tensor(a.array[:, lo:hi].copy())

    def backward(g):
        full = np.zeros_like(a.array)
        full[:, lo:hi] = g
        _acc(a, full)

    _record("slice_cols", (a,), out, backward)
    return out


def take_rows(a, indices):
    """Gather rows (first axis); repeated indices scatter-add on backward."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.array[idx].copy())

    def backward(g):
        full = np.zeros_like(a.array)
        np.add.at(full, idx, g)
        _acc(a, full)

    _record("take_rows", (a,), out, backward)
    return out


def softmax_rows(a):
    """Row-wise softmax with max subtraction; rows sum to 1 exactly."""
    a = _as_tensor(a)
    x = a.array
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    out = Tensor(z)

    def backward(g):
        _acc(a, z * (g - (g * z).sum(axis=1, keepdims=True)))

    _record("softmax_rows", (a,), out, backward)
    return out


def layer_norm(a, eps: float = 1e-5):
    """Normalize each row to mean 0, variance 1 (no affine part)."""
    a = _as_tensor(a)
    x = a.array
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got shape {x.shape}")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = Tensor(xhat)

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        _acc(a, inv * (g - gm - xhat * gx))

    _record("layer_norm", (a,), out, backward)
    return out


def scaled_attention(q, k, v, n_heads: int):
    """Multi-head scaled dot-product attention over already-projected inputs.

    q: (nq, d), k/v: (nk, d) with d divisible by n_heads; per-head scale is
    1/sqrt(d/n_heads).  Head split/merge and the softmax run inside one
    fused kernel call, recorded as a single tape node.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    nq, d = q.array.shape
    nk = k.array.shape[0]
    if d % n_heads:
        raise ShapeError(f"embedding dim {d} not divisible by {n_heads} heads")
    if k.array.shape != (nk, d) or v.array.shape != (nk, d):
        raise ShapeError("k and v must share shape (nk, d) matching q's width")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)

    def split(x, n):
        return np.ascontiguousarray(x.reshape(n, n_heads, dh).transpose(1, 0, 2))

    q3, k3, v3 = split(q.array, nq), split(k.array, nk), split(v.array, nk)
    out3, w3 = _kernels.attn_forward(q3, k3, v3, scale)
    out = Tensor(out3.transpose(1, 0, 2).reshape(nq, d))

    def backward(g):
        g3 = split(g, nq)
        dq3, dk3, dv3 = _kernels.attn_backward(q3, k3, v3, w3, g3, scale)
        if q.requires_grad:
            _acc(q, dq3.transpose(1, 0, 2).reshape(nq, d))
        if k.requires_grad:
            _acc(k, dk3.transpose(1, 0, 2).reshape(nk, d))
        if v.requires_grad:
            _acc(v, dv3.transpose(1, 0, 2).reshape(nk, d))

    _record("scaled_attention", (q, k, v), out, backward)
    return out
