"""Compiled direct loops for depthwise convolution.

Depthwise layers dominate the supernet's runtime and do not map onto a
single matrix product, so they get explicit loops.  Stride-1 variants keep
the innermost loop contiguous so it vectorises.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None

AVAILABLE = njit is not None

if AVAILABLE:

    @njit(cache=True, fastmath=True)
    def _fwd_s1(xp, w, dil, ho, wo):
        n, c, k = xp.shape[0], xp.shape[1], w.shape[1]
        out = np.zeros((n, c, ho, wo), xp.dtype)
        for b in range(n):
            for ch in range(c):
                o = out[b, ch]
                x = xp[b, ch]
                for i in range(k):
                    for j in range(k):
                        wv = w[ch, i, j]
                        c0 = j * dil
                        for r in range(ho):
                            xr = x[r + i * dil, c0:c0 + wo]
                            orow = o[r]
                            for s in range(wo):
                                orow[s] += xr[s] * wv
        return out

    @njit(cache=True, fastmath=True)
    def _bwd_s1(xp, w, g, dil, need_x, need_w):
        n, c, k = xp.shape[0], xp.shape[1], w.shape[1]
        ho, wo = g.shape[2], g.shape[3]
        gx = np.zeros_like(xp) if need_x else np.zeros((1, 1, 1, 1), xp.dtype)
        gw = np.zeros_like(w)
        for b in range(n):
            for ch in range(c):
                x = xp[b, ch]
                gg = g[b, ch]
                for i in range(k):
                    for j in range(k):
                        c0 = j * dil
                        if need_w:
                            acc = 0.0
                            for r in range(ho):
                                xr = x[r + i * dil, c0:c0 + wo]
                                grow = gg[r]
                                for s in range(wo):
                                    acc += xr[s] * grow[s]
                            gw[ch, i, j] += acc
                        if need_x:
                            wv = w[ch, i, j]
                            gxc = gx[b, ch]
                            for r in range(ho):
                                dst = gxc[r + i * dil, c0:c0 + wo]
                                grow = gg[r]
                                for s in range(wo):
                                    dst[s] += grow[s] * wv
        return gx, gw

    @njit(cache=True, fastmath=True)
    def _bwd_strided(xp, w, g, stride, dil, need_x, need_w):
        n, c, k = xp.shape[0], xp.shape[1], w.shape[1]
        ho, wo = g.shape[2], g.shape[3]
        span = stride * (wo - 1) + 1
        gx = np.zeros_like(xp) if need_x else np.zeros((1, 1, 1, 1), xp.dtype)
        gw = np.zeros_like(w)
        for b in range(n):
            for ch in range(c):
                x = xp[b, ch]
                gg = g[b, ch]
                for i in range(k):
                    for j in range(k):
                        c0 = j * dil
                        if need_w:
                            acc = 0.0
                            for r in range(ho):
                                xr = x[r * stride + i * dil, c0:c0 + span:stride]
                                grow = gg[r]
                                for s in range(wo):
                                    acc += xr[s] * grow[s]
                            gw[ch, i, j] += acc
                        if need_x:
                            wv = w[ch, i, j]
                            gxc = gx[b, ch]
                            for r in range(ho):
                                dst = gxc[r * stride + i * dil, c0:c0 + span:stride]
                                grow = gg[r]
                                for s in range(wo):
                                    dst[s] += grow[s] * wv
        return gx, gw

    @njit(cache=True, fastmath=True)
    def _fwd_strided(xp, w, stride, dil, ho, wo):
        n, c, k = xp.shape[0], xp.shape[1], w.shape[1]
        span = stride * (wo - 1) + 1
        out = np.zeros((n, c, ho, wo), xp.dtype)
        for b in range(n):
            for ch in range(c):
                o = out[b, ch]
                x = xp[b, ch]
                for i in range(k):
                    for j in range(k):
                        wv = w[ch, i, j]
                        c0 = j * dil
                        for r in range(ho):
                            xr = x[r * stride + i * dil, c0:c0 + span:stride]
                            orow = o[r]
                            for s in range(wo):
                                orow[s] += xr[s] * wv
        return out


def depthwise_forward(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """``xp`` is the padded (N, C, Hp, Wp) input, ``w`` is (C, K, K)."""
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    if stride == 1:
        return _fwd_s1(xp, w, dilation, ho, wo)
    return _fwd_strided(xp, w, stride, dilation, ho, wo)


def depthwise_backward(xp, w, g, stride, dilation, need_x=True, need_w=True):
    """Gradients w.r.t. the padded input and the (C, K, K) weight."""
    xp, w, g = np.ascontiguousarray(xp), np.ascontiguousarray(w), np.ascontiguousarray(g)
    if stride == 1:
        gx, gw = _bwd_s1(xp, w, g, dilation, need_x, need_w)
    else:
        gx, gw = _bwd_strided(xp, w, g, stride, dilation, need_x, need_w)
    return (gx if need_x else None), (gw if need_w else None)
