# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels.

Same contract as _convpy: data movement only, float64, NHWC.  col2im adds
window contributions in (ky, kx) raster order so results are bit-identical
to the fallback.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "ext"


def im2col(cnp.float64_t[:, :, :, ::1] x, int kh, int kw,
           int stride, int dilation, int padding):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - (dilation * (kh - 1) + 1)) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - (dilation * (kw - 1) + 1)) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"window {kh}x{kw} does not fit input {h}x{w}")
    cols_arr = np.zeros((n, oh, ow, kh, kw, c), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, :, :, ::1] cols = cols_arr
    cdef Py_ssize_t i, oy, ox, ky, kx, ch, y, xx
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for ky in range(kh):
                    y = oy * stride + ky * dilation - padding
                    if y < 0 or y >= h:
                        continue
                    for kx in range(kw):
                        xx = ox * stride + kx * dilation - padding
                        if xx < 0 or xx >= w:
                            continue
                        for ch in range(c):
                            cols[i, oy, ox, ky, kx, ch] = x[i, y, xx, ch]
    return cols_arr


def col2im(cnp.float64_t[:, :, :, :, :, ::1] cols, int h, int w,
           int stride, int dilation, int padding):
    cdef Py_ssize_t n = cols.shape[0], oh = cols.shape[1], ow = cols.shape[2]
    cdef Py_ssize_t kh = cols.shape[3], kw = cols.shape[4], c = cols.shape[5]
    out_arr = np.zeros((n, h, w, c), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, oy, ox, ky, kx, ch, y, xx
    # (ky, kx) must stay the outer loops: each output element then receives
    # its contributions in the same order as the fallback's offset loop.
    for ky in range(kh):
        for kx in range(kw):
            for i in range(n):
                for oy in range(oh):
                    y = oy * stride + ky * dilation - padding
                    if y < 0 or y >= h:
                        continue
                    for ox in range(ow):
                        xx = ox * stride + kx * dilation - padding
                        if xx < 0 or xx >= w:
                            continue
                        for ch in range(c):
                            out[i, y, xx, ch] += cols[i, oy, ox, ky, kx, ch]
    return out_arr
