"""Compiled inner loops for the bandwidth-bound layer operations.

Depthwise convolution, batch normalization, hard-swish and the relu
backward dominate step time as chains of numpy temporaries; the numba
versions fuse each into one or two passes with unit-stride inner loops so
LLVM can vectorize. fastmath is restricted to reassociation/contraction,
which keeps NaN/Inf propagation intact (the trainer's non-finite guard
depends on it). Reductions accumulate in float64 regardless of array
dtype. Pure-numpy fallbacks keep the package functional without numba.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap


_FM = {"reassoc", "contract"}


# ---------------------------------------------------------------------------
# depthwise convolution

@njit(cache=True, fastmath=_FM)
def _dw_fwd_s1(xp, w, out):
    b, c, oh, ow = out.shape
    kh, kw = w.shape[1], w.shape[2]
    for n in range(b):
        for ch in range(c):
            for i in range(oh):
                orow = out[n, ch, i]
                orow[:] = 0.0
                for ki in range(kh):
                    xrow = xp[n, ch, i + ki]
                    for kj in range(kw):
                        wv = w[ch, ki, kj]
                        for j in range(ow):
                            orow[j] += wv * xrow[j + kj]


@njit(cache=True, fastmath=_FM)
def _dw_fwd_gen(xp, w, stride, out):
    b, c, oh, ow = out.shape
    kh, kw = w.shape[1], w.shape[2]
    for n in range(b):
        for ch in range(c):
            for i in range(oh):
                orow = out[n, ch, i]
                orow[:] = 0.0
                for ki in range(kh):
                    xrow = xp[n, ch, i * stride + ki]
                    for kj in range(kw):
                        wv = w[ch, ki, kj]
                        for j in range(ow):
                            orow[j] += wv * xrow[j * stride + kj]


@njit(cache=True, fastmath=_FM)
def _dw_bwd_s1(xp, w, g, dxp, dw):
    b, c, oh, ow = g.shape
    kh, kw = w.shape[1], w.shape[2]
    for n in range(b):
        for ch in range(c):
            for i in range(oh):
                grow = g[n, ch, i]
                for ki in range(kh):
                    xrow = xp[n, ch, i + ki]
                    dxrow = dxp[n, ch, i + ki]
                    for kj in range(kw):
                        wv = w[ch, ki, kj]
                        acc = 0.0
                        for j in range(ow):
                            gv = grow[j]
                            dxrow[j + kj] += gv * wv
                            acc += gv * xrow[j + kj]
                        dw[ch, ki, kj] += acc


@njit(cache=True, fastmath=_FM)
def _dw_bwd_gen(xp, w, g, stride, dxp, dw):
    b, c, oh, ow = g.shape
    kh, kw = w.shape[1], w.shape[2]
    for n in range(b):
        for ch in range(c):
            for i in range(oh):
                grow = g[n, ch, i]
                for ki in range(kh):
                    xrow = xp[n, ch, i * stride + ki]
                    dxrow = dxp[n, ch, i * stride + ki]
                    for kj in range(kw):
                        wv = w[ch, ki, kj]
                        acc = 0.0
                        for j in range(ow):
                            gv = grow[j]
                            dxrow[j * stride + kj] += gv * wv
                            acc += gv * xrow[j * stride + kj]
                        dw[ch, ki, kj] += acc


def dw_conv_fwd(xp, w, stride, oh, ow):
    """Depthwise cross-correlation of padded input xp with [c,kh,kw] kernels."""
    b, c = xp.shape[0], xp.shape[1]
    if HAVE_NUMBA:
        out = np.empty((b, c, oh, ow), dtype=xp.dtype)
        if stride == 1:
            _dw_fwd_s1(xp, w, out)
        else:
            _dw_fwd_gen(xp, w, stride, out)
        return out
    out = np.zeros((b, c, oh, ow), dtype=xp.dtype)
    for ki in range(w.shape[1]):
        for kj in range(w.shape[2]):
            out += (xp[:, :, ki:ki + stride * oh:stride,
                       kj:kj + stride * ow:stride]
                    * w[:, ki, kj].reshape(1, c, 1, 1))
    return out


def dw_conv_bwd(xp, w, g, stride):
    """Returns (dxp, dw) for the depthwise convolution."""
    c = xp.shape[1]
    oh, ow = g.shape[2], g.shape[3]
    if HAVE_NUMBA:
        dxp = np.zeros_like(xp)
        dw = np.zeros(w.shape, dtype=np.float64)
        wd = w.astype(np.float64)
        if stride == 1:
            _dw_bwd_s1(xp, wd, g, dxp, dw)
        else:
            _dw_bwd_gen(xp, wd, g, stride, dxp, dw)
        return dxp, dw.astype(w.dtype)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for ki in range(w.shape[1]):
        for kj in range(w.shape[2]):
            sl = xp[:, :, ki:ki + stride * oh:stride,
                    kj:kj + stride * ow:stride]
            dw[:, ki, kj] = (g * sl).sum(axis=(0, 2, 3))
            dxp[:, :, ki:ki + stride * oh:stride,
                kj:kj + stride * ow:stride] += (
                g * w[:, ki, kj].reshape(1, c, 1, 1))
    return dxp, dw


# ---------------------------------------------------------------------------
# batch normalization

@njit(cache=True, fastmath=_FM)
def _bn_stats_loop(x, sums, sqsums):
    b, c, h, w = x.shape
    for n in range(b):
        for ch in range(c):
            s = 0.0
            q = 0.0
            for i in range(h):
                row = x[n, ch, i]
                for j in range(w):
                    v = row[j]
                    s += v
                    q += v * v
            sums[ch] += s
            sqsums[ch] += q


@njit(cache=True, fastmath=_FM)
def _bn_norm_loop(x, mean, invstd, gamma, beta, out):
    b, c, h, w = x.shape
    for n in range(b):
        for ch in range(c):
            k = invstd[ch] * gamma[ch]
            off = beta[ch] - mean[ch] * k
            for i in range(h):
                row = x[n, ch, i]
                orow = out[n, ch, i]
                for j in range(w):
                    orow[j] = row[j] * k + off

@njit(cache=True, fastmath=_FM)
def _bn_bwd_loops(x, g, gamma, mean, invstd, dx, dgamma, dbeta):
    b, c, h, w = x.shape
    n = b * h * w
    for ch in range(c):
        s1 = 0.0
        s2 = 0.0
        m = mean[ch]
        istd = invstd[ch]
        for nn in range(b):
            for i in range(h):
                grow = g[nn, ch, i]
                xrow = x[nn, ch, i]
                for j in range(w):
                    gv = grow[j]
                    s1 += gv
                    s2 += gv * (xrow[j] - m) * istd
        dbeta[ch] = s1
        dgamma[ch] = s2
        k = gamma[ch] * istd
        a = k * s1 / n
        c2 = k * istd * s2 / n
        for nn in range(b):
            for i in range(h):
                grow = g[nn, ch, i]
                xrow = x[nn, ch, i]
                drow = dx[nn, ch, i]
                for j in range(w):
                    drow[j] = k * grow[j] - a - (xrow[j] - m) * c2


def bn_stats(x):
    """Per-channel biased mean/var over (batch, h, w), f64 accumulation."""
    c = x.shape[1]
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if HAVE_NUMBA:
        sums = np.zeros(c, dtype=np.float64)
        sqsums = np.zeros(c, dtype=np.float64)
        _bn_stats_loop(x, sums, sqsums)
        mean = sums / n
        var = sqsums / n - mean * mean
        np.maximum(var, 0.0, out=var)
        return mean, var
    xd = x.astype(np.float64, copy=False)
    return xd.mean(axis=(0, 2, 3)), xd.var(axis=(0, 2, 3))


def bn_normalize(x, mean, invstd, gamma, beta):
    if HAVE_NUMBA:
        out = np.empty_like(x)
        _bn_norm_loop(x, mean.astype(np.float64), invstd.astype(np.float64),
                      gamma.astype(np.float64), beta.astype(np.float64), out)
        return out
    c = x.shape[1]
    return ((x - mean.astype(x.dtype).reshape(1, c, 1, 1))
            * invstd.astype(x.dtype).reshape(1, c, 1, 1)
            * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1))


def bn_bwd_train(x, g, gamma, mean, invstd):
    """Returns (dx, dgamma, dbeta) for train-mode batch normalization."""
    c = x.shape[1]
    if HAVE_NUMBA:
        dx = np.empty_like(x)
        dgamma = np.zeros(c, dtype=np.float64)
        dbeta = np.zeros(c, dtype=np.float64)
        _bn_bwd_loops(x, g, gamma.astype(np.float64),
                      mean.astype(np.float64), invstd.astype(np.float64),
                      dx, dgamma, dbeta)
        return dx, dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    msh = mean.astype(x.dtype).reshape(1, c, 1, 1)
    ssh = invstd.astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x - msh) * ssh
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    k = (gamma.astype(x.dtype).reshape(1, c, 1, 1) * ssh)
    dx = k * (g - dbeta.astype(x.dtype).reshape(1, c, 1, 1) / n
              - xhat * dgamma.astype(x.dtype).reshape(1, c, 1, 1) / n)
    return dx, dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


# ---------------------------------------------------------------------------
# activations

@njit(cache=True, fastmath=_FM)
def _hswish_fwd_loop(x, out):
    for i in range(x.size):
        v = x[i]
        if v <= -3.0:
            out[i] = 0.0
        elif v >= 3.0:
            out[i] = v
        else:
            out[i] = v * (v + 3.0) / 6.0


@njit(cache=True, fastmath=_FM)
def _hswish_bwd_loop(x, g, dx):
    for i in range(x.size):
        v = x[i]
        if v <= -3.0:
            dx[i] = 0.0
        elif v >= 3.0:
            dx[i] = g[i]
        else:
            dx[i] = g[i] * (2.0 * v + 3.0) / 6.0


def hswish_fwd(x):
    if HAVE_NUMBA:
        out = np.empty_like(x)
        _hswish_fwd_loop(x.ravel(), out.ravel())
        return out
    return x * np.clip(x + 3.0, 0.0, 6.0) / x.dtype.type(6.0)


def hswish_bwd(x, g):
    if HAVE_NUMBA:
        dx = np.empty_like(x)
        _hswish_bwd_loop(x.ravel(), g.ravel(), dx.ravel())
        return dx
    inner = (x > -3.0) & (x < 3.0)
    d = np.where(x >= 3.0, 1.0, 0.0).astype(x.dtype)
    d[inner] = (2.0 * x[inner] + 3.0) / 6.0
    return g * d


@njit(cache=True, fastmath=_FM)
def _relu_bwd_loop(x, g, dx):
    for i in range(x.size):
        dx[i] = g[i] if x[i] > 0.0 else 0.0


def relu_bwd(x, g):
    if HAVE_NUMBA:
        dx = np.empty_like(x)
        _relu_bwd_loop(x.ravel(), g.ravel(), dx.ravel())
        return dx
    return g * (x > 0)
