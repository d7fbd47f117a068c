"""Jitted conv2d kernels.

Loop bodies keep the output-channel axis innermost and contiguous so the
per-tap update is a straight SIMD multiply-add. Padding is implicit via
bounds checks instead of materialized pad copies. fastmath stays off:
accumulation order must be identical run to run.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .kernels_numpy import conv_out_hw


@njit(cache=True)
def _forward_nhwc(x, wt, sh, sw, ph, pw, dh, dw, Ho, Wo):
    # x: (N, Ci, H, W); wt: (Ci, kh, kw, Co); returns (N, Ho, Wo, Co)
    N, Ci, H, W = x.shape
    kh, kw, Co = wt.shape[1], wt.shape[2], wt.shape[3]
    y = np.zeros((N, Ho, Wo, Co), dtype=x.dtype)
    for n in range(N):
        for ho in range(Ho):
            for wo in range(Wo):
                acc = y[n, ho, wo]
                for ci in range(Ci):
                    for i in range(kh):
                        hi = ho * sh + i * dh - ph
                        if hi < 0 or hi >= H:
                            continue
                        for j in range(kw):
                            wi = wo * sw + j * dw - pw
                            if wi < 0 or wi >= W:
                                continue
                            xv = x[n, ci, hi, wi]
                            wrow = wt[ci, i, j]
                            for co in range(Co):
                                acc[co] += xv * wrow[co]
    return y


@njit(cache=True)
def _backward_input(gyt, wit, H, W, sh, sw, ph, pw, dh, dw):
    # gyt: (N, Ho, Wo, Co); wit: (kh, kw, Co, Ci); returns NHWC (N, H, W, Ci)
    N, Ho, Wo, Co = gyt.shape
    kh, kw, Ci = wit.shape[0], wit.shape[1], wit.shape[3]
    gx = np.zeros((N, H, W, Ci), dtype=gyt.dtype)
    for n in range(N):
        for ho in range(Ho):
            for i in range(kh):
                hi = ho * sh + i * dh - ph
                if hi < 0 or hi >= H:
                    continue
                for wo in range(Wo):
                    g = gyt[n, ho, wo]
                    for j in range(kw):
                        wi = wo * sw + j * dw - pw
                        if wi < 0 or wi >= W:
                            continue
                        acc = gx[n, hi, wi]
                        wm = wit[i, j]
                        for co in range(Co):
                            gv = g[co]
                            wrow = wm[co]
                            for ci in range(Ci):
                                acc[ci] += gv * wrow[ci]
    return gx


@njit(cache=True)
def _backward_weight(gyt, x, kh, kw, sh, sw, ph, pw, dh, dw):
    # gyt: (N, Ho, Wo, Co); x: (N, Ci, H, W); returns (Ci, kh, kw, Co)
    N, Ho, Wo, Co = gyt.shape
    Ci, H, W = x.shape[1], x.shape[2], x.shape[3]
    gw = np.zeros((Ci, kh, kw, Co), dtype=gyt.dtype)
    for n in range(N):
        for ho in range(Ho):
            for wo in range(Wo):
                g = gyt[n, ho, wo]
                for ci in range(Ci):
                    for i in range(kh):
                        hi = ho * sh + i * dh - ph
                        if hi < 0 or hi >= H:
                            continue
                        for j in range(kw):
                            wi = wo * sw + j * dw - pw
                            if wi < 0 or wi >= W:
                                continue
                            xv = x[n, ci, hi, wi]
                            grow = gw[ci, i, j]
                            for co in range(Co):
                                grow[co] += xv * g[co]
    return gw


def conv2d_forward(x, w, sh, sw, ph, pw, dh, dw):
    N, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = conv_out_hw(H, W, kh, kw, sh, sw, ph, pw, dh, dw)
    wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0))
    y = _forward_nhwc(np.ascontiguousarray(x), wt, sh, sw, ph, pw, dh, dw, Ho, Wo)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward_input(gy, w, H, W, sh, sw, ph, pw, dh, dw):
    gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))
    wit = np.ascontiguousarray(w.transpose(2, 3, 0, 1))   # (kh, kw, Co, Ci)
    gx = _backward_input(gyt, wit, H, W, sh, sw, ph, pw, dh, dw)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


def conv2d_backward_weight(gy, x, kh, kw, sh, sw, ph, pw, dh, dw):
    gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))
    gw = _backward_weight(gyt, np.ascontiguousarray(x), kh, kw, sh, sw, ph, pw, dh, dw)
    return np.ascontiguousarray(gw.transpose(3, 0, 1, 2))
