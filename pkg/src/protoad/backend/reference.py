"""Pure-numpy kernel implementations.

This is the fallback backend and the numerical reference for the compiled
core. Each function operates on contiguous arrays; callers flatten inputs
to (rows, channels) beforehand. Both float32 and float64 are supported and
the input dtype is preserved.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def layernorm_forward(x, gamma, beta, eps):
    """Normalize rows of `x` to zero mean / unit variance, then affine.

    Returns (y, xhat, rstd); xhat (rows, C) and rstd (rows,) are consumed
    by the backward.
    """
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * gamma + beta
    return y, xhat, rstd[:, 0]


def layernorm_backward(g, xhat, rstd, gamma):
    gg = g * gamma
    m1 = gg.mean(axis=1, keepdims=True)
    m2 = np.mean(gg * xhat, axis=1, keepdims=True)
    dx = (gg - m1 - xhat * m2) * rstd[:, None]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    return dx, dgamma, dbeta


def softmax_forward(x):
    """Row softmax with max subtraction for stability."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_backward(g, y):
    dot = np.sum(g * y, axis=1, keepdims=True)
    return (g - dot) * y


def gelu_forward(x):
    """Returns (y, cdf); the Gaussian CDF is reused by the backward."""
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    return x * cdf, cdf


def gelu_backward(g, x, cdf):
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
    return g * (cdf + x * pdf)


def adamw_update(p, g, m, v, t, lr, b1, b2, eps, wd, clip):
    """Fused decoupled-weight-decay Adam step with RMS update clipping.

    All arrays are flat views updated in place. The update direction is
    m_hat / (sqrt(v_hat) + eps); its root-mean-square is clipped to at
    most `clip` before scaling by `lr`. `t` is the 1-based step count.
    """
    dt = p.dtype.type
    m *= dt(b1)
    m += dt(1.0 - b1) * g
    v *= dt(b2)
    v += dt(1.0 - b2) * (g * g)
    mhat = m / dt(1.0 - b1**t)
    vhat = v / dt(1.0 - b2**t)
    u = mhat / (np.sqrt(vhat) + dt(eps))
    rms = float(np.sqrt(np.mean(u * u)))
    scale = 1.0 if rms <= clip else clip / rms
    if wd:
        p *= dt(1.0 - lr * wd)
    p -= dt(lr * scale) * u
