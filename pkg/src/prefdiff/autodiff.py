"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tape nodes are created eagerly by the ops below; ``backward`` walks the graph
in reverse topological order and accumulates gradients into every leaf with
``requires_grad``. Only the ops needed by the denoiser network and its loss
family are implemented.
"""

import numpy as np


class TapeReuseError(RuntimeError):
    """Raised when backward() is called twice through the same root."""


class NonScalarRootError(ValueError):
    """Raised when backward() is called on a non-scalar tensor."""


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data):
    return Tensor(data, requires_grad=False)


def param(data):
    return Tensor(np.asarray(data), requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(np.asarray(x))


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accum(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b))

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    out._bwd = bwd
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad, (a, b))

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    out._bwd = bwd
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b))

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    out._bwd = bwd
    return out


def neg(a):
    return mul(a, -1.0)


def matmul(a, b):
    """2-D matrix product; gradients flow to either operand as needed."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    out._bwd = bwd
    return out


def tsum(a, axis=None):
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis), a.requires_grad, (a,))

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    out._bwd = bwd
    return out


def tmean(a):
    a = _as_tensor(a)
    n = a.data.size
    out = Tensor(a.data.mean(), a.requires_grad, (a,))

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    out._bwd = bwd
    return out


def slice_rows(a, start, stop):
    """View rows [start, stop) of a tensor along axis 0."""
    a = _as_tensor(a)
    out = Tensor(a.data[start:stop], a.requires_grad, (a,))

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            _accum(a, full)

    out._bwd = bwd
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a):
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out = Tensor(a.data * s, a.requires_grad, (a,))

    def bwd(g):
        _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    out._bwd = bwd
    return out


def softplus(a):
    """log(1 + exp(x)), evaluated stably; derivative is sigmoid(x)."""
    a = _as_tensor(a)
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), a.requires_grad, (a,))

    def bwd(g):
        _accum(a, g * _sigmoid(x))

    out._bwd = bwd
    return out


def backward(root):
    """Accumulate d(root)/d(leaf) into .grad of every requires_grad leaf.

    The root must be scalar-valued and each root may be walked only once.
    """
    if root.data.size != 1:
        raise NonScalarRootError(f"backward root must be scalar, got shape {root.data.shape}")
    if root._consumed:
        raise TapeReuseError("backward() already called through this tape")
    root._consumed = True

    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
