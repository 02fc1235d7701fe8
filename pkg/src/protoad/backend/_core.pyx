# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Same signatures and arithmetic as `protoad.backend.reference`, with the
row loops fused into single passes (no numpy temporaries). Accumulations
run in double precision regardless of the storage dtype, so float32
results can differ from the fallback in the last bits; parity is checked
to tolerance, not bit-exactly.
"""

import numpy as np

from libc.math cimport erf, erff, exp, expf, sqrt

ctypedef fused floating:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


cdef inline floating _erf(floating x) noexcept nogil:
    if floating is float:
        return erff(x)
    else:
        return erf(x)


def layernorm_forward(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((rows, cols), dtype=dtype)
    xhat_arr = np.empty((rows, cols), dtype=dtype)
    rstd_arr = np.empty(rows, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, rs, xc, xh
    for i in range(rows):
        mu = 0.0
        for j in range(cols):
            mu += x[i, j]
        mu /= cols
        var = 0.0
        for j in range(cols):
            xc = x[i, j] - mu
            var += xc * xc
        var /= cols
        rs = 1.0 / sqrt(var + eps)
        rstd[i] = <floating> rs
        for j in range(cols):
            xh = (x[i, j] - mu) * rs
            xhat[i, j] = <floating> xh
            y[i, j] = <floating> (xh * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layernorm_backward(floating[:, ::1] g, floating[:, ::1] xhat, floating[::1] rstd,
                       floating[::1] gamma):
    cdef Py_ssize_t rows = g.shape[0], cols = g.shape[1]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((rows, cols), dtype=dtype)
    dgamma_acc = np.zeros(cols, dtype=np.float64)
    dbeta_acc = np.zeros(cols, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_acc
    cdef double[::1] dbeta = dbeta_acc
    cdef Py_ssize_t i, j
    cdef double m1, m2, gg
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            gg = g[i, j] * gamma[j]
            m1 += gg
            m2 += gg * xhat[i, j]
        m1 /= cols
        m2 /= cols
        for j in range(cols):
            dx[i, j] = <floating> ((g[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i])
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
    return dx_arr, dgamma_acc.astype(dtype), dbeta_acc.astype(dtype)


def softmax_forward(floating[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((rows, cols), dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef Py_ssize_t i, j
    cdef floating m, e
    cdef double s
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, cols):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(cols):
            e = _exp(x[i, j] - m)
            y[i, j] = e
            s += e
        s = 1.0 / s
        for j in range(cols):
            y[i, j] = <floating> (y[i, j] * s)
    return y_arr


def softmax_backward(floating[:, ::1] g, floating[:, ::1] y):
    cdef Py_ssize_t rows = g.shape[0], cols = g.shape[1]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((rows, cols), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += g[i, j] * y[i, j]
        for j in range(cols):
            dx[i, j] = <floating> ((g[i, j] - dot) * y[i, j])
    return dx_arr


def gelu_forward(floating[::1] x):
    """Returns (y, cdf); the Gaussian CDF is reused by the backward."""
    cdef Py_ssize_t n = x.shape[0]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdf_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] y = y_arr
    cdef floating[::1] cdf = cdf_arr
    cdef Py_ssize_t i
    cdef floating v, c
    for i in range(n):
        v = x[i]
        c = <floating> (0.5 * (1.0 + _erf(<floating> (v * INV_SQRT2))))
        cdf[i] = c
        y[i] = v * c
    return y_arr, cdf_arr


def gelu_backward(floating[::1] g, floating[::1] x, floating[::1] cdf):
    cdef Py_ssize_t n = x.shape[0]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] dx = dx_arr
    cdef Py_ssize_t i
    cdef floating v, pdf
    for i in range(n):
        v = x[i]
        pdf = <floating> (_exp(<floating> (-0.5 * v * v)) * INV_SQRT2PI)
        dx[i] = g[i] * (cdf[i] + v * pdf)
    return dx_arr


def adamw_update(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
                 int t, double lr, double b1, double b2, double eps, double wd,
                 double clip):
    cdef Py_ssize_t n = p.shape[0]
    u_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] u = u_arr
    cdef Py_ssize_t i
    cdef double bc1 = 1.0 - b1 ** t
    cdef double bc2 = 1.0 - b2 ** t
    cdef double mi, vi, ui, sumsq = 0.0
    for i in range(n):
        mi = b1 * m[i] + (1.0 - b1) * g[i]
        vi = b2 * v[i] + (1.0 - b2) * (<double> g[i]) * g[i]
        m[i] = <floating> mi
        v[i] = <floating> vi
        ui = (mi / bc1) / (sqrt(vi / bc2) + eps)
        u[i] = ui
        sumsq += ui * ui
    cdef double rms = sqrt(sumsq / n)
    cdef double scale = 1.0 if rms <= clip else clip / rms
    cdef double decay = 1.0 - lr * wd
    for i in range(n):
        if wd != 0.0:
            p[i] = <floating> (p[i] * decay - lr * scale * u[i])
        else:
            p[i] = <floating> (p[i] - lr * scale * u[i])
