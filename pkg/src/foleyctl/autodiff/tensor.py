"""Reverse-mode autodiff over dense numpy arrays.

A Tensor wraps an ndarray; every operation that touches a tensor requiring
gradients records a backward closure. Calling ``backward()`` on a scalar
walks the recorded graph once in reverse topological order, accumulating
into ``.grad``. Ops preserve the dtype of their inputs, so the same graph
code runs in float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidInput, ShapeError

_grad_enabled = True
_nan_checks = False


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_nan_checks(enabled: bool) -> None:
    """Toggle finiteness assertions after every op (slow; for debugging)."""
    global _nan_checks
    _nan_checks = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- introspection ------------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return self.data.item()

    # -- graph --------------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            # copy: callers may hand us views into buffers they still own
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def _accumulate_owned(self, g):
        """Like accumulate_grad, but takes ownership of a freshly built buffer."""
        if self.grad is None:
            if g.dtype != self.data.dtype:
                g = g.astype(self.data.dtype)
            self.grad = g
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this (scalar) tensor through the graph."""
        if grad is None:
            if self.data.size != 1:
                raise InvalidInput(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.accumulate_grad(grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        a, b = _pair(self, other)
        return add(a, neg(b))

    def __rsub__(self, other):
        a, b = _pair(other, self)
        return add(a, neg(b))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr)


def _pair(a, b):
    """Coerce a (tensor, scalar) pair without promoting the tensor's dtype.

    A bare Python number would become a float64 array and drag a float32
    graph up with it; cast it to the tensor's floating dtype instead.
    """
    a_num = isinstance(a, (int, float)) and not isinstance(a, bool)
    b_num = isinstance(b, (int, float)) and not isinstance(b, bool)
    if a_num and isinstance(b, Tensor) and np.issubdtype(b.dtype, np.floating):
        return as_tensor(a, dtype=b.dtype), b
    if b_num and isinstance(a, Tensor) and np.issubdtype(a.dtype, np.floating):
        return a, as_tensor(b, dtype=a.dtype)
    return as_tensor(a), as_tensor(b)


def _node(data, parents, backward):
    """Create a result tensor, recording the graph only when needed."""
    if _nan_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    parents = tuple(p for p in parents if p.requires_grad)
    if _grad_enabled and parents:
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate_grad(-g)

    return _node(-a.data, (a,), backward)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate_owned(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), backward)


def power(a, exponent):
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise InvalidInput("power supports scalar exponents only")
    out = a.data**exponent

    def backward(g):
        a.accumulate_grad(g * exponent * a.data ** (exponent - 1))

    return _node(out, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * out)

    return _node(out, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects tensors with ndim >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dimensions differ", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate_owned(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate_owned(_unbroadcast(gb, b.shape))

    return _node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _node(out, (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        a.accumulate_grad(np.transpose(g, inverse))

    return _node(out, (a,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None
        for i in items
    )


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            # basic indexing never aliases, so += is safe and fast
            full[index] += g
        else:
            np.add.at(full, index, g)
        a.accumulate_grad(full)

    return _node(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                t.accumulate_grad(g[tuple(idx)])

    return _node(out, tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        slices = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, slices):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return _node(out, tensors, backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _node(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape) / scale)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0))

    return _node(out, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a.accumulate_grad(g * out * (1.0 - out))

    return _node(out, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a.accumulate_grad(g * (1.0 - out * out))

    return _node(out, (a,), backward)


def gelu(a):
    """tanh-approximation GELU."""
    a = as_tensor(a)
    x = a.data
    c = float(np.sqrt(2.0 / np.pi))
    # x*x instead of x**3: pow is an order of magnitude slower than multiply
    x2 = x * x
    inner = x2 * 0.044715
    inner += 1.0
    inner *= x
    inner *= c
    t = np.tanh(inner, out=inner)
    out = t + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        da = x2 * (3 * 0.044715)
        da += 1.0
        da *= c
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        da *= sech2
        da *= x
        da += 1.0
        da += t
        da *= 0.5
        da *= g
        a._accumulate_owned(da)

    return _node(out, (a,), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        ga = g * out
        inner = ga.sum(axis=axis, keepdims=True)
        np.subtract(g, inner, out=ga)
        ga *= out
        a._accumulate_owned(ga)

    return _node(out, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_z

    def backward(g):
        soft = np.exp(out)
        a.accumulate_grad(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), backward)
