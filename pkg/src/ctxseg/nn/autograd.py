"""Reverse-mode autodiff on float64 numpy arrays.

A Tensor wraps an ndarray plus the closure that maps its output gradient to
parent gradients.  backward() walks the tape once in topological order.
Everything stays float64 so finite-difference checks are meaningful and
runs are reproducible to the bit.
"""

import numpy as np

from . import convkernels


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._vjp = _vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None:
                continue
            for p, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # arithmetic; each delegates to a module-level op
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, e):
        return power(self, e)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return Tensor(a.data + b.data, _parents=(a, b), _vjp=lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return Tensor(a.data * b.data, _parents=(a, b), _vjp=lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    return Tensor(a.data / b.data, _parents=(a, b), _vjp=lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def power(a, e):
    a = _wrap(a)
    e = float(e)
    return Tensor(a.data ** e, _parents=(a,),
                  _vjp=lambda g: (g * e * a.data ** (e - 1.0),))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return Tensor(a.data @ b.data, _parents=(a, b), _vjp=lambda g: (
        g @ b.data.T, a.data.T @ g))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * out,))


def log(a):
    a = _wrap(a)
    return Tensor(np.log(a.data), _parents=(a,), _vjp=lambda g: (g / a.data,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _wrap(a)
    out = _sigmoid(a.data)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, alpha=0.2):
    a = _wrap(a)
    pos = a.data > 0
    return Tensor(np.where(pos, a.data, alpha * a.data), _parents=(a,),
                  _vjp=lambda g: (g * np.where(pos, 1.0, alpha),))


def softmax(a, axis=-1):
    a = _wrap(a)
    s = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=axis, keepdims=True)
    return Tensor(p, _parents=(a,), _vjp=lambda g: (
        p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = _wrap(a)
    s = a.data - a.data.max(axis=axis, keepdims=True)
    out = s - np.log(np.exp(s).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (
        g - p * g.sum(axis=axis, keepdims=True),))


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _vjp=vjp)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def reshape(a, *shape):
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Tensor(a.data.reshape(shape), _parents=(a,),
                  _vjp=lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None):
    a = _wrap(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), _parents=(a,),
                  _vjp=lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = _wrap(a)

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(a.data[idx], _parents=(a,), _vjp=vjp)


def concat(parts, axis=-1):
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  _parents=tuple(parts), _vjp=vjp)


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0, mask=None):
    """NHWC cross-correlation; mask is a fixed (KH,KW) 0/1 tap pattern."""
    x, weight = _wrap(x), _wrap(weight)
    bias = _wrap(bias) if bias is not None else None
    out, cols = convkernels.conv2d_forward(
        x.data, weight.data, None if bias is None else bias.data,
        stride, dilation, padding, mask)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx, gw, gb = convkernels.conv2d_backward(
            g, cols, x.data.shape, weight.data, stride, dilation, padding,
            mask, need_gx=x.requires_grad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor(out, _parents=parents, _vjp=vjp)
