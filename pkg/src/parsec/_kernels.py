"""Compiled loops for depthwise convolution and 3x3 pooling.

Loop order is fixed, so results do not depend on scheduling. Inputs are
already padded; `stride`/`dilation` follow conv2d semantics.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def depthwise_forward(xp, w, stride, dilation, Ho, Wo):
    B, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            o = out[b, c]
            x = xp[b, c]
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    off = j * dilation
                    for h in range(Ho):
                        orow = o[h]
                        xrow = x[h * stride + i * dilation]
                        for q in range(Wo):
                            orow[q] += wv * xrow[q * stride + off]
    return out


@njit(cache=True)
def depthwise_backward(xp, w, g, stride, dilation):
    B, C, Ho, Wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for b in range(B):
        for c in range(C):
            gp = g[b, c]
            x = xp[b, c]
            gx = gxp[b, c]
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    off = j * dilation
                    acc = 0.0
                    for h in range(Ho):
                        r = h * stride + i * dilation
                        grow = gp[h]
                        xrow = x[r]
                        gxrow = gx[r]
                        for q in range(Wo):
                            s = q * stride + off
                            acc += grow[q] * xrow[s]
                            gxrow[s] += grow[q] * wv
                    gw[c, i, j] += acc
    return gxp, gw


@njit(cache=True)
def channel_moments(x):
    """Per-channel mean and biased variance of a (B, C, H, W) array."""
    B, C, H, W = x.shape
    n = B * H * W
    mean = np.zeros(C)
    var = np.zeros(C)
    for c in range(C):
        s = 0.0
        for b in range(B):
            for h in range(H):
                for q in range(W):
                    s += x[b, c, h, q]
        m = s / n
        v = 0.0
        for b in range(B):
            for h in range(H):
                for q in range(W):
                    d = x[b, c, h, q] - m
                    v += d * d
        mean[c] = m
        var[c] = v / n
    return mean, var


@njit(cache=True)
def channel_sums(g, xhat):
    """Per-channel sum(g) and sum(g * xhat)."""
    B, C, H, W = g.shape
    sg = np.zeros(C)
    sgx = np.zeros(C)
    for c in range(C):
        a = 0.0
        z = 0.0
        for b in range(B):
            for h in range(H):
                for q in range(W):
                    v = g[b, c, h, q]
                    a += v
                    z += v * xhat[b, c, h, q]
        sg[c] = a
        sgx[c] = z
    return sg, sgx


@njit(cache=True)
def bn_normalize(x, mean, invstd, gamma, beta):
    B, C, H, W = x.shape
    xhat = np.empty(x.shape)
    out = np.empty(x.shape)
    for b in range(B):
        for c in range(C):
            m, s, gm, bt = mean[c], invstd[c], gamma[c], beta[c]
            for h in range(H):
                for q in range(W):
                    v = (x[b, c, h, q] - m) * s
                    xhat[b, c, h, q] = v
                    out[b, c, h, q] = v * gm + bt
    return xhat, out


@njit(cache=True)
def bn_input_grad(g, xhat, scale, mean_g, mean_gx):
    B, C, H, W = g.shape
    dx = np.empty(g.shape)
    for b in range(B):
        for c in range(C):
            k, a, z = scale[c], mean_g[c], mean_gx[c]
            for h in range(H):
                for q in range(W):
                    dx[b, c, h, q] = (g[b, c, h, q] - a - xhat[b, c, h, q] * z) * k
    return dx


@njit(cache=True)
def maxpool_forward(xp, k, stride, Ho, Wo):
    B, C = xp.shape[0], xp.shape[1]
    out = np.empty((B, C, Ho, Wo))
    arg = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for h in range(Ho):
                for q in range(Wo):
                    best = -np.inf
                    bi = 0
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, c, h * stride + i, q * stride + j]
                            if v > best:
                                best = v
                                bi = i * k + j
                    out[b, c, h, q] = best
                    arg[b, c, h, q] = bi
    return out, arg


@njit(cache=True)
def maxpool_backward(shape, arg, g, k, stride):
    gxp = np.zeros(shape)
    B, C, Ho, Wo = g.shape
    for b in range(B):
        for c in range(C):
            for h in range(Ho):
                for q in range(Wo):
                    a = arg[b, c, h, q]
                    gxp[b, c, h * stride + a // k, q * stride + a % k] += g[b, c, h, q]
    return gxp
