# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the kernels in ``cpu.py``.

Single-pass C loops; float32 and float64 via a fused type so the 64-bit
gradient-check mode runs through the same code path.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _out_dim(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((b, c * kh * kw, oh * ow), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, ki, kj, oy, ox, iy, ix, row
    cdef real v
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ic * kh + ki) * kw + kj
                        for oy in range(oh):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                for ox in range(ow):
                                    out[ib, row, oy * ow + ox] = 0
                                continue
                            for ox in range(ow):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= w:
                                    v = 0
                                else:
                                    v = x[ib, ic, iy, ix]
                                out[ib, row, oy * ow + ox] = v
    return out_arr


def col2im(real[:, :, ::1] cols, Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ic * kh + ki) * kw + kj
                        for oy in range(oh):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + kj - pad
                                if 0 <= ix < w:
                                    out[ib, ic, iy, ix] += cols[ib, row, oy * ow + ox]
    return out_arr


def maxpool_forward(real[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((b, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((b, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t ib, ic, oy, ox, ki, kj, iy, ix, best_i
    cdef real best, v
    cdef bint has
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        has = False
                        best = 0
                        best_i = 0
                        for ki in range(k):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            for kj in range(k):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= w:
                                    continue
                                v = x[ib, ic, iy, ix]
                                if not has or v > best:
                                    has = True
                                    best = v
                                    best_i = iy * w + ix
                        out[ib, ic, oy, ox] = best
                        idx[ib, ic, oy, ox] = best_i
    return out_arr, idx_arr


def maxpool_backward(real[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] argmax, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = dout.shape[0], c = dout.shape[1], oh = dout.shape[2], ow = dout.shape[3]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((b, c, h * w), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t ib, ic, oy, ox
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        dx[ib, ic, argmax[ib, ic, oy, ox]] += dout[ib, ic, oy, ox]
    return dx_arr.reshape(b, c, h, w)
