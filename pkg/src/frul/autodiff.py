"""Tape-based reverse-mode differentiation over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar result walks the tape in reverse topological
order and accumulates exact gradients into every upstream tensor.  The
op set is exactly what a small decoder-only transformer and its training
losses need, nothing more.

All ops compute in the dtype of their inputs, so running the same graph
in float64 gives gradients suitable for finite-difference verification.
"""

from __future__ import annotations

import numpy as np

_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_C = 0.044715


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
               for p in parts)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, name: str = ""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, parents=(self, other))
        def bw(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(g, other.data.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, parents=(self, other))
        def bw(g):
            self._accum(_unbroadcast(g * other.data, self.data.shape))
            other._accum(_unbroadcast(g * self.data, other.data.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        a, b = self, as_tensor(other)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError("matmul operands must have ndim >= 2")
        out = Tensor(a.data @ b.data, parents=(a, b))
        def bw(g):
            a._accum(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
            b._accum(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))
        out._backward = bw
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], parents=(self,))
        basic = _is_basic_index(key)
        def bw(g):
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            if basic:
                # Basic indexing never selects an element twice, so a
                # plain in-place add is safe and much faster than add.at.
                self.grad[key] += g
            else:
                np.add.at(self.grad, key, g)
        out._backward = bw
        return out

    # -- shape ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), parents=(self,))
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out = Tensor(self.data.transpose(axes), parents=(self,))
        out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))
        def bw(g):
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, ax)
            self._accum(np.broadcast_to(g, self.data.shape))
        out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # -- pointwise nonlinearities ------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), parents=(self,))
        out._backward = lambda g: self._accum(g * out.data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))
        out._backward = lambda g: self._accum(g / self.data)
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), parents=(self,))
        out._backward = lambda g: self._accum(g * (1.0 - out.data * out.data))
        return out

    def gelu(self):
        """Smooth tanh-form gelu; differentiable everywhere, so finite
        differences agree with the analytic gradient at every point."""
        x = self.data
        u = _SQRT_2_OVER_PI * (x + _GELU_C * (x * x * x))
        t = np.tanh(u)
        out = Tensor(0.5 * x * (1.0 + t), parents=(self,))
        def bw(g):
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * (x * x))
            self._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))
        out._backward = bw
        return out

    def softmax(self):
        """Softmax over the last axis, shift-stabilized."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        out = Tensor(p, parents=(self,))
        def bw(g):
            self._accum(p * (g - (g * p).sum(axis=-1, keepdims=True)))
        out._backward = bw
        return out

    def log_softmax(self):
        """Log-softmax over the last axis, shift-stabilized."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = Tensor(z - lse, parents=(self,))
        def bw(g):
            p = np.exp(out.data)
            self._accum(g - p * g.sum(axis=-1, keepdims=True))
        out._backward = bw
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids], parents=(table,))
    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)
    out._backward = bw
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, parents=(x, gain, bias))
    def bw(g):
        gain._accum(_unbroadcast(g * xhat, gain.data.shape))
        bias._accum(_unbroadcast(g, bias.data.shape))
        gx = g * gain.data
        n = x.data.shape[-1]
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        x._accum(dx)
    out._backward = bw
    return out


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis (np.take_along_axis), differentiably."""
    idx = np.asarray(idx)
    out = Tensor(np.take_along_axis(x.data, idx, axis=-1), parents=(x,))
    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(x.grad, tuple(lead) + (idx,), g)
    out._backward = bw
    return out


def minimum_const(x: Tensor, cap: float) -> Tensor:
    """Elementwise min(x, cap); gradient flows only where x is below cap."""
    out = Tensor(np.minimum(x.data, cap), parents=(x,))
    out._backward = lambda g: x._accum(g * (x.data < cap))
    return out


def log1mexp_values(x: np.ndarray) -> np.ndarray:
    """Numerically careful log(1 - exp(x)) for x < 0.

    Crossover at -ln 2: below it 1 - e^x is far from zero and log1p(-e^x)
    is exact; above it e^x is close to one and expm1 keeps the difference
    at full precision.
    """
    x = np.asarray(x)
    if np.any(x >= 0):
        raise ValueError("log1mexp requires strictly negative inputs")
    small = x < -np.log(2.0)
    with np.errstate(divide="ignore"):
        return np.where(small, np.log1p(-np.exp(x)), np.log(-np.expm1(x)))


def log1mexp(x: Tensor) -> Tensor:
    """Differentiable log(1 - exp(x)) for x < 0; d/dx = -1/expm1(-x)."""
    out = Tensor(log1mexp_values(x.data), parents=(x,))
    out._backward = lambda g: x._accum(g * (-1.0 / np.expm1(-x.data)))
    return out
