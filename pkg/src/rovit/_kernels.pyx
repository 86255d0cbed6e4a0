# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled bilinear gather/scatter and fused focal-term kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, exp, log1p, fabs, pow

cnp.import_array()


cdef inline void _corners(double y, double x, Py_ssize_t h, Py_ssize_t w,
                          Py_ssize_t *y0, Py_ssize_t *x0, Py_ssize_t *y1, Py_ssize_t *x1,
                          double *wy, double *wx) noexcept nogil:
    cdef Py_ssize_t a = <Py_ssize_t>floor(y)
    cdef Py_ssize_t b = <Py_ssize_t>floor(x)
    if a < 0:
        a = 0
    elif a > h - 1:
        a = h - 1
    if b < 0:
        b = 0
    elif b > w - 1:
        b = w - 1
    y0[0] = a
    x0[0] = b
    y1[0] = a + 1 if a + 1 < h else h - 1
    x1[0] = b + 1 if b + 1 < w else w - 1
    wy[0] = y - a
    wx[0] = x - b


def bilinear_gather(const double[:, :, :, ::1] grid, const double[:, ::1] ys,
                    const double[:, ::1] xs):
    cdef Py_ssize_t G = grid.shape[0], H = grid.shape[1], W = grid.shape[2], D = grid.shape[3]
    cdef Py_ssize_t N = ys.shape[1]
    out_arr = np.empty((G, N, D), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t g, n, k, y0, x0, y1, x1
    cdef double wy, wx, w00, w01, w10, w11
    with nogil:
        for g in range(G):
            for n in range(N):
                _corners(ys[g, n], xs[g, n], H, W, &y0, &x0, &y1, &x1, &wy, &wx)
                w00 = (1.0 - wy) * (1.0 - wx)
                w01 = (1.0 - wy) * wx
                w10 = wy * (1.0 - wx)
                w11 = wy * wx
                for k in range(D):
                    out[g, n, k] = (grid[g, y0, x0, k] * w00 + grid[g, y0, x1, k] * w01
                                    + grid[g, y1, x0, k] * w10 + grid[g, y1, x1, k] * w11)
    return out_arr


def bilinear_scatter(const double[:, :, ::1] grad, const double[:, ::1] ys,
                     const double[:, ::1] xs, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t G = grad.shape[0], N = grad.shape[1], D = grad.shape[2]
    out_arr = np.zeros((G, h, w, D), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t g, n, k, y0, x0, y1, x1
    cdef double wy, wx, w00, w01, w10, w11, v
    with nogil:
        for g in range(G):
            for n in range(N):
                _corners(ys[g, n], xs[g, n], h, w, &y0, &x0, &y1, &x1, &wy, &wx)
                w00 = (1.0 - wy) * (1.0 - wx)
                w01 = (1.0 - wy) * wx
                w10 = wy * (1.0 - wx)
                w11 = wy * wx
                for k in range(D):
                    v = grad[g, n, k]
                    out[g, y0, x0, k] += v * w00
                    out[g, y0, x1, k] += v * w01
                    out[g, y1, x0, k] += v * w10
                    out[g, y1, x1, k] += v * w11
    return out_arr


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e = exp(-fabs(x))
    if x >= 0:
        return 1.0 / (1.0 + e)
    return e / (1.0 + e)


def focal_terms(const double[:, ::1] logits, double gamma):
    cdef Py_ssize_t B = logits.shape[0], C = logits.shape[1]
    terms_arr = np.empty((B, C), dtype=np.float64)
    dterms_arr = np.empty((B, C), dtype=np.float64)
    cdef double[:, ::1] terms = terms_arr
    cdef double[:, ::1] dterms = dterms_arr
    cdef Py_ssize_t i, j
    cdef double sign, u, s, sp, mod
    with nogil:
        for i in range(B):
            for j in range(C):
                sign = -1.0 if i == j else 1.0
                u = sign * logits[i, j]
                s = _sigmoid(u)
                sp = (u if u > 0 else 0.0) + log1p(exp(-fabs(u)))
                mod = pow(s, gamma)
                terms[i, j] = mod * sp
                dterms[i, j] = sign * mod * (gamma * (1.0 - s) * sp + s)
    return terms_arr, dterms_arr
