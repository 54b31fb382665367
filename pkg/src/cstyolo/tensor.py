"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient. Operations record
a backward closure and their differentiable parents; ``backward()`` on a
scalar root replays the closures in reverse topological order. The network
layout convention is channel-first (B, C, H, W) and float32; float64 is
used for finite-difference gradient checks.

Tensors are immutable after construction apart from gradient accumulation,
so values can be shared freely across threads; a single graph's backward
pass is single-threaded.
"""

import contextlib

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / data plumbing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _coerce(data, dtype):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        # Leaves get an eagerly-zeroed gradient so "unused leaf -> zero grad"
        # holds without special cases; interior nodes allocate lazily.
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._prev = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def result(cls, data, parents, backward):
        """Wrap an op output, recording the graph edge when needed."""
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        if _grad_enabled:
            prev = tuple(p for p in parents if p.requires_grad)
        else:
            prev = ()
        if prev:
            t.requires_grad = True
            t._prev = prev
            t._backward = backward
        else:
            t.requires_grad = False
            t._prev = ()
            t._backward = None
        return t

    @staticmethod
    def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def full(shape, value, dtype=DEFAULT_DTYPE, requires_grad=False):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def randn(shape, rng, std=1.0, dtype=DEFAULT_DTYPE, requires_grad=False):
        return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=requires_grad)

    # -- bookkeeping -----------------------------------------------------------

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
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def accum_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- backward --------------------------------------------------------------

    def backward(self, free_graph=True):
        """Backpropagate from a scalar root, filling leaf gradients."""
        if self.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                if free_graph:
                    node._backward = None
                    node._prev = ()
                    if node is not self:
                        node.grad = None

    # -- elementwise arithmetic --------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = Tensor.result(self.data + other.data, (self, other), None)

            def backward():
                g = out.grad
                if self.requires_grad:
                    self.accum_grad(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other.accum_grad(_unbroadcast(g, other.data.shape))

            if out._prev:
                out._backward = backward
            return out
        out = Tensor.result(self.data + other, (self,), None)

        def backward():
            self.accum_grad(out.grad)

        if out._prev:
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor.result(-self.data, (self,), None)

        def backward():
            self.accum_grad(-out.grad)

        if out._prev:
            out._backward = backward
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out = Tensor.result(self.data - other.data, (self, other), None)

            def backward():
                g = out.grad
                if self.requires_grad:
                    self.accum_grad(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other.accum_grad(-_unbroadcast(g, other.data.shape))

            if out._prev:
                out._backward = backward
            return out
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = Tensor.result(self.data * other.data, (self, other), None)

            def backward():
                g = out.grad
                if self.requires_grad:
                    self.accum_grad(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other.accum_grad(_unbroadcast(g * self.data, other.data.shape))

            if out._prev:
                out._backward = backward
            return out
        out = Tensor.result(self.data * other, (self,), None)

        def backward():
            self.accum_grad(out.grad * other)

        if out._prev:
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out = Tensor.result(self.data / other.data, (self, other), None)

            def backward():
                g = out.grad
                if self.requires_grad:
                    self.accum_grad(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    other.accum_grad(_unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

            if out._prev:
                out._backward = backward
            return out
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        out = Tensor.result(other / self.data, (self,), None)

        def backward():
            self.accum_grad(-out.grad * other / (self.data * self.data))

        if out._prev:
            out._backward = backward
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only scalar exponents are supported")
        out = Tensor.result(self.data**p, (self,), None)

        def backward():
            self.accum_grad(out.grad * p * self.data ** (p - 1))

        if out._prev:
            out._backward = backward
        return out

    # -- elementwise functions ----------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = Tensor.result(y, (self,), None)

        def backward():
            self.accum_grad(out.grad * y)

        if out._prev:
            out._backward = backward
        return out

    def log(self):
        out = Tensor.result(np.log(self.data), (self,), None)

        def backward():
            self.accum_grad(out.grad / self.data)

        if out._prev:
            out._backward = backward
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = Tensor.result(y, (self,), None)

        def backward():
            self.accum_grad(out.grad / (2.0 * y))

        if out._prev:
            out._backward = backward
        return out

    def atan(self):
        out = Tensor.result(np.arctan(self.data), (self,), None)

        def backward():
            self.accum_grad(out.grad / (1.0 + self.data * self.data))

        if out._prev:
            out._backward = backward
        return out

    def sigmoid(self):
        with np.errstate(over="ignore"):
            y = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor.result(y, (self,), None)

        def backward():
            self.accum_grad(out.grad * y * (1.0 - y))

        if out._prev:
            out._backward = backward
        return out

    def relu(self):
        mask = self.data > 0
        out = Tensor.result(np.where(mask, self.data, 0), (self,), None)

        def backward():
            self.accum_grad(out.grad * mask)

        if out._prev:
            out._backward = backward
        return out

    def clamp(self, lo=None, hi=None):
        y = np.clip(self.data, lo, hi)
        mask = np.ones_like(self.data, dtype=bool)
        if lo is not None:
            mask &= self.data > lo
        if hi is not None:
            mask &= self.data < hi
        out = Tensor.result(y, (self,), None)

        def backward():
            self.accum_grad(out.grad * mask)

        if out._prev:
            out._backward = backward
        return out

    def maximum(self, other):
        o = other.data if isinstance(other, Tensor) else other
        mask = self.data >= o
        out_parents = (self, other) if isinstance(other, Tensor) else (self,)
        out = Tensor.result(np.where(mask, self.data, o), out_parents, None)

        def backward():
            g = out.grad
            if self.requires_grad:
                self.accum_grad(_unbroadcast(g * mask, self.data.shape))
            if isinstance(other, Tensor) and other.requires_grad:
                other.accum_grad(_unbroadcast(g * ~mask, other.data.shape))

        if out._prev:
            out._backward = backward
        return out

    def minimum(self, other):
        o = other.data if isinstance(other, Tensor) else other
        mask = self.data <= o
        out_parents = (self, other) if isinstance(other, Tensor) else (self,)
        out = Tensor.result(np.where(mask, self.data, o), out_parents, None)

        def backward():
            g = out.grad
            if self.requires_grad:
                self.accum_grad(_unbroadcast(g * mask, self.data.shape))
            if isinstance(other, Tensor) and other.requires_grad:
                other.accum_grad(_unbroadcast(g * ~mask, other.data.shape))

        if out._prev:
            out._backward = backward
        return out

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor.result(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accum_grad(np.broadcast_to(g, self.data.shape))

        if out._prev:
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        d = self.data if self.data.flags.c_contiguous else np.ascontiguousarray(self.data)
        out = Tensor.result(d.reshape(shape), (self,), None)

        def backward():
            self.accum_grad(out.grad.reshape(src))

        if out._prev:
            out._backward = backward
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out = Tensor.result(np.ascontiguousarray(self.data.transpose(axes)), (self,), None)

        def backward():
            self.accum_grad(out.grad.transpose(inv))

        if out._prev:
            out._backward = backward
        return out

    def __getitem__(self, idx):
        out = Tensor.result(np.ascontiguousarray(self.data[idx]), (self,), None)

        def backward():
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            self.grad[idx] += out.grad

        if out._prev:
            out._backward = backward
        return out

    def roll(self, shifts, axes):
        out = Tensor.result(np.roll(self.data, shifts, axes), (self,), None)
        inv = -shifts if isinstance(shifts, int) else tuple(-s for s in shifts)

        def backward():
            self.accum_grad(np.roll(out.grad, inv, axes))

        if out._prev:
            out._backward = backward
        return out

    def pad(self, pad_width):
        """Zero-pad; ``pad_width`` follows numpy's per-axis (before, after)."""
        out = Tensor.result(np.pad(self.data, pad_width), (self,), None)
        sl = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, self.data.shape))

        def backward():
            self.accum_grad(out.grad[sl])

        if out._prev:
            out._backward = backward
        return out

    # -- matmul -----------------------------------------------------------------------

    def __matmul__(self, other):
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-D")
        if b.data.ndim == 2:
            out = Tensor.result(a.data @ b.data, (a, b), None)

            def backward():
                g = out.grad
                if a.requires_grad:
                    a.accum_grad(g @ b.data.swapaxes(-1, -2))
                if b.requires_grad:
                    nd = g.ndim - 2
                    b.accum_grad(np.tensordot(a.data, g, axes=(tuple(range(nd + 1)), tuple(range(nd + 1)))))

            if out._prev:
                out._backward = backward
            return out
        if a.data.shape[:-2] != b.data.shape[:-2]:
            raise ShapeError(f"batched matmul needs equal batch dims, got {a.data.shape} @ {b.data.shape}")
        out = Tensor.result(np.matmul(a.data, b.data), (a, b), None)

        def backward():
            g = out.grad
            if a.requires_grad:
                a.accum_grad(np.matmul(g, b.data.swapaxes(-1, -2)))
            if b.requires_grad:
                b.accum_grad(np.matmul(a.data.swapaxes(-1, -2), g))

        if out._prev:
            out._backward = backward
        return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the source shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g
