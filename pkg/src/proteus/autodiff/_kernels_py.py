"""Pure-numpy row kernels, used when the compiled extension is unavailable.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Inputs are C-contiguous; 2-D inputs are (rows, features).
"""
import numpy as np
from scipy.special import erf

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_backward(x, g):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def layer_norm_forward(x, weight, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * weight + bias, xhat, rstd[:, 0]


def layer_norm_backward(g, xhat, rstd, weight):
    gw = (g * xhat).sum(axis=0)
    gb = g.sum(axis=0)
    gxhat = g * weight
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * rstd[:, None]
    return gx, gw.astype(g.dtype, copy=False), gb.astype(g.dtype, copy=False)


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_backward(s, g):
    return s * (g - (g * s).sum(axis=1, keepdims=True))


def log_softmax_backward(logp, g):
    return g - np.exp(logp) * g.sum(axis=1, keepdims=True)
