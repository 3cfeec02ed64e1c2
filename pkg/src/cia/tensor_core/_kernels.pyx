# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (valid correlation on pre-padded NHWC input).

Accumulation is done in double precision and each sample is processed
independently, so the result for one sample never depends on the batch it
travels in. Innermost loops run over a contiguous channel axis without a
reduction so they vectorize.
"""

import numpy as np
from cython cimport floating


def valid_conv_forward(const floating[:, :, :, ::1] xp, const floating[:, :, :, ::1] w, const floating[::1] b):
    cdef Py_ssize_t N = xp.shape[0], Hp = xp.shape[1], Wp = xp.shape[2], C = xp.shape[3]
    cdef Py_ssize_t k = w.shape[0], Co = w.shape[3]
    cdef Py_ssize_t H = Hp - k + 1, W = Wp - k + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, H, W, Co), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    wd_arr = np.asarray(w, dtype=np.float64).copy()
    cdef double[::1] wd = wd_arr.reshape(-1)
    cdef double[::1] acc = np.empty(Co, dtype=np.float64)
    cdef double *pacc = &acc[0]
    cdef const double *pw
    cdef const floating *px
    cdef floating *po
    cdef Py_ssize_t n, i, j, di, dj, c, co
    cdef double xv
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for co in range(Co):
                        pacc[co] = b[co]
                    for di in range(k):
                        for dj in range(k):
                            px = &xp[n, i + di, j + dj, 0]
                            pw = &wd[((di * k + dj) * C) * Co]
                            for c in range(C):
                                xv = px[c]
                                for co in range(Co):
                                    pacc[co] += xv * pw[c * Co + co]
                    po = &o[n, i, j, 0]
                    for co in range(Co):
                        po[co] = <floating>pacc[co]
    return out


def valid_conv_backward_input(const floating[:, :, :, ::1] gy, const floating[:, :, :, ::1] w):
    cdef Py_ssize_t N = gy.shape[0], H = gy.shape[1], W = gy.shape[2], Co = gy.shape[3]
    cdef Py_ssize_t k = w.shape[0], C = w.shape[2]
    cdef Py_ssize_t Hp = H + k - 1, Wp = W + k - 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, Hp, Wp, C), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    # k x k x Co x C so the inner loop runs over input channels
    wt_arr = np.ascontiguousarray(np.asarray(w, dtype=np.float64).transpose(0, 1, 3, 2))
    cdef double[::1] wt = wt_arr.reshape(-1)
    cdef double[:, :, ::1] acc = np.empty((Hp, Wp, C), dtype=np.float64)
    cdef double *pa
    cdef const double *pw
    cdef const floating *pg
    cdef Py_ssize_t n, i, j, di, dj, c, co
    cdef double g
    with nogil:
        for n in range(N):
            acc[:, :, :] = 0.0
            for i in range(H):
                for j in range(W):
                    pg = &gy[n, i, j, 0]
                    for di in range(k):
                        for dj in range(k):
                            pa = &acc[i + di, j + dj, 0]
                            pw = &wt[((di * k + dj) * Co) * C]
                            for co in range(Co):
                                g = pg[co]
                                for c in range(C):
                                    pa[c] += g * pw[co * C + c]
            for i in range(Hp):
                for j in range(Wp):
                    for c in range(C):
                        o[n, i, j, c] = <floating>acc[i, j, c]
    return out


def valid_conv_backward_kernel(const floating[:, :, :, ::1] xp, const floating[:, :, :, ::1] gy, Py_ssize_t k):
    cdef Py_ssize_t N = gy.shape[0], H = gy.shape[1], W = gy.shape[2], Co = gy.shape[3]
    cdef Py_ssize_t C = xp.shape[3]
    dtype = np.float32 if floating is float else np.float64
    acc_arr = np.zeros((k, k, C, Co), dtype=np.float64)
    cdef double[::1] acc = acc_arr.reshape(-1)
    cdef double[::1] gbuf = np.empty(Co, dtype=np.float64)
    cdef double *pg = &gbuf[0]
    cdef double *pa
    cdef const floating *px
    cdef Py_ssize_t n, i, j, di, dj, c, co
    cdef double xv
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    for co in range(Co):
                        pg[co] = gy[n, i, j, co]
                    for di in range(k):
                        for dj in range(k):
                            px = &xp[n, i + di, j + dj, 0]
                            pa = &acc[((di * k + dj) * C) * Co]
                            for c in range(C):
                                xv = px[c]
                                for co in range(Co):
                                    pa[c * Co + co] += xv * pg[co]
    return acc_arr.astype(dtype)
