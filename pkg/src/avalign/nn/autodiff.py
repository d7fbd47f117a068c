"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure recorded at
construction. Calling backward() on a scalar walks the tape in reverse
topological order and accumulates gradients into .grad. Reductions and
matmuls are plain single-threaded numpy, so repeated runs of the same
graph are bitwise identical.

Gradients keep the dtype of the data they flow through; running a model
in float64 gives finite-difference-grade gradients everywhere.
"""

from __future__ import annotations

import numpy as np

from . import kernels

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- bookkeeping ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad only on scalars")
            grad = np.ones_like(self.data)
        # iterative post-order topological sort
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_astensor(other, self.dtype), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _astensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _astensor(a)
    b = _astensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _astensor(a)
    b = _astensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _astensor(a)
    b = _astensor(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _astensor(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a = _astensor(a)
    b = _astensor(b)
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            bt = np.swapaxes(b.data, -1, -2)
            ga = np.matmul(g, bt)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            at = np.swapaxes(a.data, -1, -2)
            gb = np.matmul(at, g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


# -- elementwise nonlinearities -------------------------------------------

def exp(a) -> Tensor:
    a = _astensor(a)
    data = np.exp(a.data)

    def backward(g):
        a._accum(g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = _astensor(a)
    data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    """Plain square root; callers add an epsilon under the root when the
    argument can reach exactly zero."""
    a = _astensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        a._accum(g / (2.0 * data))

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = _astensor(a)
    data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _astensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accum(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = _astensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accum(g * (a.data > 0))

    return _make(data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes inside the closed interval [lo, hi]."""
    a = _astensor(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        mask = (a.data >= lo) & (a.data <= hi)
        a._accum(g * mask)

    return _make(data, (a,), backward)


# -- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _astensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            ga = np.broadcast_to(g, a.data.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = g if keepdims else np.expand_dims(g, axes)
            ga = np.broadcast_to(gg, a.data.shape)
        a._accum(np.ascontiguousarray(ga))

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _astensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape surgery ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _astensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _astensor(a)
    data = np.transpose(a.data, axes)

    def backward(g):
        if axes is None:
            a._accum(np.transpose(g))
        else:
            inv = np.argsort(axes)
            a._accum(np.transpose(g, inv))

    return _make(data, (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = _astensor(a)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))

    return _make(data, (a,), backward)


def getitem(a, idx) -> Tensor:
    a = _astensor(a)
    data = a.data[idx]
    fancy = isinstance(idx, (np.ndarray, list)) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx))

    def backward(g):
        ga = np.zeros_like(a.data)
        if fancy:
            np.add.at(ga, idx, g)
        else:
            ga[idx] += g
        a._accum(ga)

    return _make(data, (a,), backward)


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along axis 0 with repeat-safe gradient scatter."""
    if axis != 0:
        raise NotImplementedError("take supports axis=0")
    a = _astensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    data = a.data[indices]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices, g)
        a._accum(ga)

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_astensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_astensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, k, axis=axis))

    return _make(data, tuple(tensors), backward)


# -- structured ops -----------------------------------------------------------

def conv2d(x, w, stride=(1, 1), padding=(0, 0), dilation=(1, 1)) -> Tensor:
    x = _astensor(x)
    w = _astensor(w)
    data = kernels.conv2d_forward(x.data, w.data, stride, padding, dilation)
    H, W = x.data.shape[2], x.data.shape[3]
    kh, kw = w.data.shape[2], w.data.shape[3]

    def backward(g):
        if x.requires_grad:
            x._accum(kernels.conv2d_backward_input(g, w.data, (H, W), stride, padding, dilation))
        if w.requires_grad:
            w._accum(kernels.conv2d_backward_weight(g, x.data, (kh, kw), stride, padding, dilation))

    return _make(data, (x, w), backward)


def upsample2x(a) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of (N, C, H, W)."""
    a = _astensor(a)
    data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(g):
        N, C, H2, W2 = g.shape
        a._accum(g.reshape(N, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)))

    return _make(data, (a,), backward)
