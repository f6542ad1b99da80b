"""Parameterized layers on top of the autograd ops.

Layers own their parameters as Tensors and expose them through params(),
a flat name -> Tensor dict that the optimizers and the checkpoint format
consume.  Initialization draws from a caller-provided Generator so weights
are a pure function of the init stream.
"""

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class Conv2d:
    """NHWC convolution; mask (if any) is a fixed (k,k) 0/1 tap pattern."""

    def __init__(self, rng, cin, cout, k=1, stride=1, dilation=1, padding=0,
                 mask=None, name="conv"):
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float64)
        taps = k * k if self.mask is None else int(self.mask.sum())
        w = glorot(rng, (k, k, cin, cout), taps * cin, taps * cout)
        if self.mask is not None:
            w *= self.mask[:, :, None, None]
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.name = name

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias, self.stride,
                         self.dilation, self.padding, self.mask)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class Linear:
    def __init__(self, rng, din, dout, name="linear"):
        self.weight = Tensor(glorot(rng, (din, dout), din, dout), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)
        self.name = name

    def __call__(self, x):
        return ag.add(ag.matmul(x, self.weight), self.bias)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


def dropout(x, rate, rng, training):
    """Inverted dropout; draws the keep mask from ``rng`` when training."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ag.mul(x, keep)


def merge_params(*layers):
    out = {}
    for layer in layers:
        for k, v in layer.params().items():
            if k in out:
                raise ValueError(f"duplicate parameter name {k!r}")
            out[k] = v
    return out
