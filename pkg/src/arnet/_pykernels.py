"""Pure numpy im2col / col2im, used when the compiled kernels are unavailable."""

import numpy as np


def im2col(xp, kh, kw, stride, dilation, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            cols[:, :, i, j] = xp[:, :, y0:y0 + stride * (oh - 1) + 1:stride,
                                  x0:x0 + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, c, hp, wp, kh, kw, stride, dilation, oh, ow):
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            xp[:, :, y0:y0 + stride * (oh - 1) + 1:stride,
               x0:x0 + stride * (ow - 1) + 1:stride] += cols[:, :, i, j]
    return xp
