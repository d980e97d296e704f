# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: tap-list im2col/col2im and the dense CRF kernel matrix.

A convolution tap is an (dy, dx) offset from ``(y * stride, x * stride)``;
padding is implicit (out-of-range reads are zero). Images are NHWC. Patch
matrices have one row per output pixel and columns ordered tap-major,
channel-minor, so every inner loop is a contiguous channel run.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int[:, ::1] taps, int stride, int oh, int ow):
    cdef Py_ssize_t n_img = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t chans = x.shape[3]
    cdef Py_ssize_t T = taps.shape[0]
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((n_img * oh * ow, T * chans), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef Py_ssize_t c, t, n, y, xx, row, iy, ix, base
    with nogil:
        for n in range(n_img):
            for y in range(oh):
                for xx in range(ow):
                    row = (n * oh + y) * ow + xx
                    for t in range(T):
                        iy = y * stride + taps[t, 0]
                        ix = xx * stride + taps[t, 1]
                        base = t * chans
                        if 0 <= iy < h and 0 <= ix < w:
                            for c in range(chans):
                                cols[row, base + c] = x[n, iy, ix, c]
                        else:
                            for c in range(chans):
                                cols[row, base + c] = 0
    return cols_arr


def col2im(floating[:, ::1] cols, int n_img, int h, int w, int chans,
           int[:, ::1] taps, int stride, int oh, int ow):
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n_img, h, w, chans), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t T = taps.shape[0]
    cdef Py_ssize_t c, t, n, y, xx, row, iy, ix, base
    with nogil:
        for n in range(n_img):
            for y in range(oh):
                for xx in range(ow):
                    row = (n * oh + y) * ow + xx
                    for t in range(T):
                        iy = y * stride + taps[t, 0]
                        ix = xx * stride + taps[t, 1]
                        if 0 <= iy < h and 0 <= ix < w:
                            base = t * chans
                            for c in range(chans):
                                out[n, iy, ix, c] += cols[row, base + c]
    return out_arr


def crf_kernel_rows(double[:, ::1] pos, double[:, ::1] rgb, Py_ssize_t r0, Py_ssize_t r1,
                    double w_app, double w_smooth, double theta_alpha,
                    double theta_beta, double theta_gamma):
    cdef Py_ssize_t n = pos.shape[0], i, j
    out_arr = np.empty((r1 - r0, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double ia = 0.5 / (theta_alpha * theta_alpha)
    cdef double ib = 0.5 / (theta_beta * theta_beta)
    cdef double ig = 0.5 / (theta_gamma * theta_gamma)
    cdef double dp, dc, d0, d1
    with nogil:
        for i in range(r0, r1):
            for j in range(n):
                d0 = pos[i, 0] - pos[j, 0]
                d1 = pos[i, 1] - pos[j, 1]
                dp = d0 * d0 + d1 * d1
                d0 = rgb[i, 0] - rgb[j, 0]
                dc = d0 * d0
                d0 = rgb[i, 1] - rgb[j, 1]
                dc = dc + d0 * d0
                d0 = rgb[i, 2] - rgb[j, 2]
                dc = dc + d0 * d0
                out[i - r0, j] = w_app * exp(-dp * ia - dc * ib) + w_smooth * exp(-dp * ig)
            out[i - r0, i] = 0.0
    return out_arr
