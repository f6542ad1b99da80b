"""Pure numpy im2col / col2im kernels (fallback when the compiled extension
is unavailable).

Both engines move data only; the surrounding matmuls are shared, so the
compiled and fallback paths produce bit-identical results.  col2im adds
window contributions in (ky, kx) raster order, matching the extension's
accumulation order exactly.
"""

import numpy as np

BACKEND = "py"


def out_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    eff = dilation * (k - 1) + 1
    return (n + 2 * padding - eff) // stride + 1


def im2col(x, kh, kw, stride, dilation, padding):
    """Gather sliding windows of ``x`` (N,H,W,C) into (N,OH,OW,KH,KW,C)."""
    n, h, w, c = x.shape
    oh = out_size(h, kh, stride, dilation, padding)
    ow = out_size(w, kw, stride, dilation, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"window {kh}x{kw} does not fit input {h}x{w}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for ky in range(kh):
        ys = ky * dilation
        for kx in range(kw):
            xs = kx * dilation
            cols[:, :, :, ky, kx, :] = x[
                :, ys : ys + (oh - 1) * stride + 1 : stride,
                xs : xs + (ow - 1) * stride + 1 : stride, :,
            ]
    return cols


def col2im(cols, h, w, stride, dilation, padding):
    """Scatter-add window gradients (N,OH,OW,KH,KW,C) back to (N,H,W,C)."""
    n, oh, ow, kh, kw, c = cols.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for ky in range(kh):
        ys = ky * dilation
        for kx in range(kw):
            xs = kx * dilation
            out[
                :, ys : ys + (oh - 1) * stride + 1 : stride,
                xs : xs + (ow - 1) * stride + 1 : stride, :,
            ] += cols[:, :, :, ky, kx, :]
    if padding:
        out = out[:, padding : padding + h, padding : padding + w, :]
    return np.ascontiguousarray(out)
