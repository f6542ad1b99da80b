"""Minimal float64 neural-net toolkit: autograd tape, conv kernels with a
compiled fast path, layers, optimizers, and named rng streams."""

from . import autograd, layers, optim, rng
from .autograd import Tensor
from .convkernels import BACKEND

__all__ = ["autograd", "layers", "optim", "rng", "Tensor", "BACKEND"]
