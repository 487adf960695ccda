"""A small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

Every op result records its parents and a closure that pushes the incoming
gradient back to them.  Node ids come from a global counter, so a node's
inputs always carry smaller ids than the node itself, and one reverse sweep
in descending id order is a valid topological traversal.
"""
import itertools

import numpy as np

_ids = itertools.count()

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class LabelError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "id")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, parents, backward_fn):
    live = [p for p in parents if p.requires_grad]
    if not live:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward_fn)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(out, "add", (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, "mul", (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _result(out, "matmul", (a, b), bw)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bw(g):
        _accum(x, g * mask)

    return _result(out, "relu", (x,), bw)


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(src))

    return _result(out, "reshape", (x,), bw)


def tsum(x):
    x = as_tensor(x)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), "sum", (x,), bw)


def max_over_axis(x, axis=-2):
    """Maximum along ``axis``; the gradient goes to the first argmax only."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DegenerateInputError(f"max over empty axis {axis} of shape {x.shape}")
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        _accum(x, gx)

    res = _result(out, "max", (x,), bw)
    return res


def concat_last(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat leading shapes differ: {a.shape} vs {b.shape}")
    p = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def bw(g):
        _accum(a, g[..., :p])
        _accum(b, g[..., p:])

    return _result(out, "concat", (a, b), bw)


def gather_rows(x, idx):
    """Index the leading axis of ``x``: out[...] = x[idx[...]]."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def bw(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, idx.ravel(), g.reshape((-1,) + x.shape[1:]))
        _accum(x, gx)

    return _result(out, "gather", (x,), bw)


def dropout(x, rate, rng, training):
    """Inverted dropout: active only when training, identity otherwise."""
    x = as_tensor(x)
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# normalisation and loss


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalisation over the rows of a B x C tensor.

    In training mode the running statistics (plain float64 arrays) are updated
    in place: ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects B x C input, got {x.shape}")
    b = x.shape[0]
    if training:
        if b < 2:
            raise DegenerateInputError("batch_norm in training mode needs at least 2 rows")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (b / (b - 1))
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            if training:
                gx = inv / b * (b * gh - gh.sum(axis=0) - xhat * (gh * xhat).sum(axis=0))
            else:
                gx = gh * inv
            _accum(x, gx)

    return _result(out, "batch_norm", (x, gamma, beta), bw)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    b, k = logits.shape
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at position {bad[0]} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])
    probs = np.exp(z - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        _accum(logits, d * (g / b))

    return _result(np.asarray(loss), "softmax_xent", (logits,), bw)


# ---------------------------------------------------------------------------


def backward(root):
    """Reverse sweep from a scalar root.  Leaf gradients accumulate."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        stack.extend(p for p in t.parents if p.requires_grad)
    nodes = sorted(seen.values(), key=lambda t: t.id, reverse=True)
    for t in nodes:
        if t._backward is not None:
            t.grad = None
    root.grad = np.ones(root.shape)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
