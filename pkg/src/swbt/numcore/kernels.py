"""Row-wise kernels used by the fused ops in :mod:`swbt.numcore.tensor`.

Each kernel exists twice: an explicit loop compiled by numba and a
vectorised numpy version. All operate on 2-D C-contiguous arrays whose
last axis is the reduction axis; callers reshape before dispatching.
"""
import math

import numpy as np

from .._accel import ENABLED, njit

GELU_C = math.sqrt(2.0 / math.pi)


# -- layer norm -------------------------------------------------------------


@njit
def _layernorm_fwd_loop(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit
def _layernorm_bwd_loop(g, xhat, rstd, gamma):
    n, d = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(d, dtype=g.dtype)
    dbeta = np.zeros(d, dtype=g.dtype)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gh = g[i, j] * gamma[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            gh = g[i, j] * gamma[j]
            dx[i, j] = rstd[i] * (gh - s1 - xhat[i, j] * s2)
    return dx, dgamma, dbeta


def _layernorm_fwd_numpy(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = c * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _layernorm_bwd_numpy(g, xhat, rstd, gamma):
    gh = g * gamma
    s1 = gh.mean(axis=-1, keepdims=True)
    s2 = (gh * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (gh - s1 - xhat * s2)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


# -- softmax ----------------------------------------------------------------


@njit
def _softmax_fwd_loop(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        for j in range(d):
            y[i, j] /= s
    return y


@njit
def _softmax_bwd_loop(g, y):
    n, d = g.shape
    dx = np.empty_like(g)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return dx


def _softmax_fwd_numpy(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd_numpy(g, y):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


# -- gelu (tanh approximation) ---------------------------------------------
# forward returns the inner tanh so backward does not recompute it


@njit
def _gelu_fwd_loop(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    th = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        t = math.tanh(GELU_C * (v + 0.044715 * v * v * v))
        th[i] = t
        out[i] = 0.5 * v * (1.0 + t)
    return out.reshape(x.shape), th.reshape(x.shape)


@njit
def _gelu_bwd_loop(g, x, th):
    fx = x.ravel()
    fg = g.ravel()
    ft = th.ravel()
    out = np.empty_like(fx)
    for i in range(fx.size):
        v = fx[i]
        t = ft[i]
        dt = GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        out[i] = fg[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt)
    return out.reshape(x.shape)


def _gelu_fwd_numpy(x):
    t = np.tanh(GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd_numpy(g, x, t):
    dt = GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


# Scalar math.exp / math.tanh inside a compiled loop lose to numpy's
# vectorised transcendental kernels (~3x on tanh), so softmax forward and
# GELU forward stay on numpy even when numba is enabled. GELU backward has
# no transcendental call and the loop avoids numpy's temporaries.
if ENABLED:
    layernorm_fwd, layernorm_bwd = _layernorm_fwd_loop, _layernorm_bwd_loop
    softmax_fwd, softmax_bwd = _softmax_fwd_numpy, _softmax_bwd_loop
    gelu_fwd, gelu_bwd = _gelu_fwd_numpy, _gelu_bwd_loop
else:
    layernorm_fwd, layernorm_bwd = _layernorm_fwd_numpy, _layernorm_bwd_numpy
    softmax_fwd, softmax_bwd = _softmax_fwd_numpy, _softmax_bwd_numpy
    gelu_fwd, gelu_bwd = _gelu_fwd_numpy, _gelu_bwd_numpy

LOOP_KERNELS = {
    "layernorm_fwd": _layernorm_fwd_loop,
    "layernorm_bwd": _layernorm_bwd_loop,
    "softmax_fwd": _softmax_fwd_loop,
    "softmax_bwd": _softmax_bwd_loop,
    "gelu_fwd": _gelu_fwd_loop,
    "gelu_bwd": _gelu_bwd_loop,
}
NUMPY_KERNELS = {
    "layernorm_fwd": _layernorm_fwd_numpy,
    "layernorm_bwd": _layernorm_bwd_numpy,
    "softmax_fwd": _softmax_fwd_numpy,
    "softmax_bwd": _softmax_bwd_numpy,
    "gelu_fwd": _gelu_fwd_numpy,
    "gelu_bwd": _gelu_bwd_numpy,
}
