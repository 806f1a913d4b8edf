# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels. Same signatures and semantics as ``_kernels_py``.

Loops run sequentially in a fixed order so results are bitwise reproducible.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double SQRT1_2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu_forward(real[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] o = out
    cdef double v
    for i in range(n):
        v = x[i]
        o[i] = <real>(0.5 * v * (1.0 + erf(v * SQRT1_2)))
    return out


def gelu_backward(real[::1] x, real[::1] g):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] o = out
    cdef double v, cdf, pdf
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + erf(v * SQRT1_2))
        pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
        o[i] = <real>(g[i] * (cdf + v * pdf))
    return out


def layer_norm_forward(real[:, ::1] x, real[::1] weight, real[::1] bias, double eps):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    dt = np.asarray(x).dtype
    y_arr = np.empty((rows, cols), dtype=dt)
    xhat_arr = np.empty((rows, cols), dtype=dt)
    rstd_arr = np.empty(rows, dtype=dt)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mean, var, d, inv
    for r in range(rows):
        mean = 0.0
        for c in range(cols):
            mean += x[r, c]
        mean /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - mean
            var += d * d
        var /= cols
        inv = 1.0 / sqrt(var + eps)
        rstd[r] = <real>inv
        for c in range(cols):
            d = (x[r, c] - mean) * inv
            xhat[r, c] = <real>d
            y[r, c] = <real>(d * weight[c] + bias[c])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] weight):
    cdef Py_ssize_t r, c, rows = g.shape[0], cols = g.shape[1]
    dt = np.asarray(g).dtype
    gx_arr = np.empty((rows, cols), dtype=dt)
    gw_arr = np.zeros(cols, dtype=np.float64)
    gb_arr = np.zeros(cols, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double m1, m2, gh
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            gh = g[r, c] * weight[c]
            m1 += gh
            m2 += gh * xhat[r, c]
            gw[c] += g[r, c] * xhat[r, c]
            gb[c] += g[r, c]
        m1 /= cols
        m2 /= cols
        for c in range(cols):
            gh = g[r, c] * weight[c]
            gx[r, c] = <real>((gh - m1 - xhat[r, c] * m2) * rstd[r])
    return gx_arr, gw_arr.astype(dt, copy=False), gb_arr.astype(dt, copy=False)


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] o = out
    cdef double m, s, e
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            e = exp(x[r, c] - m)
            o[r, c] = <real>e
            s += e
        for c in range(cols):
            o[r, c] = <real>(o[r, c] / s)
    return out


def log_softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] o = out
    cdef double m, s, lse
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            s += exp(x[r, c] - m)
        lse = log(s)
        for c in range(cols):
            o[r, c] = <real>(x[r, c] - m - lse)
    return out


def softmax_backward(real[:, ::1] s, real[:, ::1] g):
    cdef Py_ssize_t r, c, rows = s.shape[0], cols = s.shape[1]
    out = np.empty((rows, cols), dtype=np.asarray(s).dtype)
    cdef real[:, ::1] o = out
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += g[r, c] * s[r, c]
        for c in range(cols):
            o[r, c] = <real>(s[r, c] * (g[r, c] - dot))
    return out


def log_softmax_backward(real[:, ::1] logp, real[:, ::1] g):
    cdef Py_ssize_t r, c, rows = logp.shape[0], cols = logp.shape[1]
    out = np.empty((rows, cols), dtype=np.asarray(logp).dtype)
    cdef real[:, ::1] o = out
    cdef double tot
    for r in range(rows):
        tot = 0.0
        for c in range(cols):
            tot += g[r, c]
        for c in range(cols):
            o[r, c] = <real>(g[r, c] - exp(logp[r, c]) * tot)
    return out
