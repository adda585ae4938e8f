# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels for strided 2-D convolution."""

import numpy as np

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] x, real[:, :, ::1] out,
            int kh, int kw, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t n, c, i, j, oy, ox, row, col
    cdef Py_ssize_t iy, ix
    for n in range(n_batch):
        for c in range(channels):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        col = oy * wo
                        if iy < 0 or iy >= height:
                            for ox in range(wo):
                                out[n, row, col + ox] = 0
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= width:
                                out[n, row, col + ox] = 0
                            else:
                                out[n, row, col + ox] = x[n, c, iy, ix]


def _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] out,
            int kh, int kw, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n_batch = out.shape[0], channels = out.shape[1]
    cdef Py_ssize_t height = out.shape[2], width = out.shape[3]
    cdef Py_ssize_t n, c, i, j, oy, ox, row, col
    cdef Py_ssize_t iy, ix
    for n in range(n_batch):
        for c in range(channels):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= height:
                            continue
                        col = oy * wo
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix >= 0 and ix < width:
                                out[n, c, iy, ix] += cols[n, row, col + ox]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
    if x.dtype == np.float32 or x.dtype == np.float64:
        _im2col(x, out, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out


def col2im(cols, tuple x_shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros(x_shape, dtype=cols.dtype)
    if cols.dtype == np.float32 or cols.dtype == np.float64:
        _col2im(cols, out, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
