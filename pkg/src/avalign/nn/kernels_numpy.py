"""Pure-numpy conv2d kernels.

Decomposes the convolution into kernel-tap contributions: for each (i, j)
offset a strided view of the (padded) input meets one (Co, Ci) weight
slice in a tensordot. Vectorized enough to ride BLAS while staying an
independent reference for the jitted backend.
"""

from __future__ import annotations

import numpy as np


def conv_out_hw(H: int, W: int, kh: int, kw: int, sh: int, sw: int,
                ph: int, pw: int, dh: int, dw: int) -> tuple[int, int]:
    Ho = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    Wo = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    return Ho, Wo


def _tap_slice(i: int, j: int, Ho: int, Wo: int, sh: int, sw: int,
               dh: int, dw: int) -> tuple[slice, slice]:
    return (slice(i * dh, i * dh + sh * (Ho - 1) + 1, sh),
            slice(j * dw, j * dw + sw * (Wo - 1) + 1, sw))


def conv2d_forward(x, w, sh, sw, ph, pw, dh, dw):
    N, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = conv_out_hw(H, W, kh, kw, sh, sw, ph, pw, dh, dw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    acc = np.zeros((N, Ho, Wo, Co), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = _tap_slice(i, j, Ho, Wo, sh, sw, dh, dw)
            acc += np.tensordot(xp[:, :, hs, ws], w[:, :, i, j], axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def conv2d_backward_input(gy, w, H, W, sh, sw, ph, pw, dh, dw):
    N, Co, Ho, Wo = gy.shape
    _, Ci, kh, kw = w.shape
    gxp = np.zeros((N, Ci, H + 2 * ph, W + 2 * pw), dtype=gy.dtype)
    gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))
    for i in range(kh):
        for j in range(kw):
            g = np.tensordot(gyt, w[:, :, i, j], axes=([3], [0]))  # (N,Ho,Wo,Ci)
            hs, ws = _tap_slice(i, j, Ho, Wo, sh, sw, dh, dw)
            gxp[:, :, hs, ws] += g.transpose(0, 3, 1, 2)
    if ph or pw:
        gxp = gxp[:, :, ph : ph + H, pw : pw + W]
    return np.ascontiguousarray(gxp)


def conv2d_backward_weight(gy, x, kh, kw, sh, sw, ph, pw, dh, dw):
    N, Co, Ho, Wo = gy.shape
    _, Ci, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    gw = np.zeros((Co, Ci, kh, kw), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = _tap_slice(i, j, Ho, Wo, sh, sw, dh, dw)
            gw[:, :, i, j] = np.tensordot(gy, xp[:, :, hs, ws], axes=([0, 2, 3], [0, 2, 3]))
    return gw
