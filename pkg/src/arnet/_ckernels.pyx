# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im gathers for strided, dilated 2-D convolution."""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride, int dilation,
           int oh, int ow):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c * kh * kw, oh * ow), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, y, x, row, col, iy
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        col = 0
                        for y in range(oh):
                            iy = y * stride + i * dilation
                            for x in range(ow):
                                cols[b, row, col] = xp[b, ch, iy, x * stride + j * dilation]
                                col += 1
    return out


def col2im(real[:, :, ::1] cols, int c, int hp, int wp, int kh, int kw,
           int stride, int dilation, int oh, int ow):
    cdef Py_ssize_t n = cols.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] xp = out
    cdef Py_ssize_t b, ch, i, j, y, x, row, col, iy
    with nogil:
        for b in range(n):
            # per-channel sequential accumulation keeps results order-stable
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        col = 0
                        for y in range(oh):
                            iy = y * stride + i * dilation
                            for x in range(ow):
                                xp[b, ch, iy, x * stride + j * dilation] += cols[b, row, col]
                                col += 1
    return out
