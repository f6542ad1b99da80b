"""2-D convolution via im2col + BLAS matmul, NHWC, float64.

The im2col/col2im data movement comes from the compiled extension when it
imported cleanly, else from the numpy fallback.  Set CTXSEG_CONV_BACKEND to
"ext" or "py" to force one (forcing "ext" raises if the build is missing).
Both backends order their accumulations identically, so outputs match
bit for bit and every other module can ignore which one is active.
"""

import os

import numpy as np

from . import _convpy

_forced = os.environ.get("CTXSEG_CONV_BACKEND", "").strip().lower()
if _forced not in ("", "ext", "py"):
    raise ValueError(f"CTXSEG_CONV_BACKEND must be 'ext' or 'py', got {_forced!r}")

if _forced == "py":
    _impl = _convpy
else:
    try:
        from . import _convext as _impl
    except ImportError:
        if _forced == "ext":
            raise
        _impl = _convpy

BACKEND = _impl.BACKEND
out_size = _convpy.out_size


def _as64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, weight, bias, stride=1, dilation=1, padding=0, mask=None):
    """Cross-correlate x (N,H,W,Ci) with weight (KH,KW,Ci,Co).

    Returns (out, cols) where cols is the im2col buffer the backward pass
    reuses.  mask, when given, is a (KH,KW) 0/1 array zeroing weight taps.
    """
    kh, kw, ci, co = weight.shape
    if x.shape[3] != ci:
        raise ValueError(f"input has {x.shape[3]} channels, weight expects {ci}")
    wm = weight * mask[:, :, None, None] if mask is not None else weight
    cols = _impl.im2col(_as64(x), kh, kw, stride, dilation, padding)
    n, oh, ow = cols.shape[:3]
    out = cols.reshape(n * oh * ow, kh * kw * ci) @ wm.reshape(kh * kw * ci, co)
    if bias is not None:
        out += bias
    return out.reshape(n, oh, ow, co), cols


def conv2d_backward(g, cols, x_shape, weight, stride=1, dilation=1, padding=0,
                    mask=None, need_gx=True):
    """Gradients of conv2d_forward: returns (gx, gweight, gbias)."""
    kh, kw, ci, co = weight.shape
    n, oh, ow = cols.shape[:3]
    gf = _as64(g).reshape(n * oh * ow, co)
    gw = (cols.reshape(n * oh * ow, kh * kw * ci).T @ gf).reshape(weight.shape)
    if mask is not None:
        gw *= mask[:, :, None, None]
    gb = gf.sum(axis=0)
    gx = None
    if need_gx:
        wm = weight * mask[:, :, None, None] if mask is not None else weight
        gcols = (gf @ wm.reshape(kh * kw * ci, co).T).reshape(n, oh, ow, kh, kw, ci)
        gx = _impl.col2im(_as64(gcols), x_shape[1], x_shape[2],
                          stride, dilation, padding)
    return gx, gw, gb
