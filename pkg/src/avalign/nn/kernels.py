"""Conv kernel dispatch.

The backend is chosen once at import from the AVALIGN_KERNELS environment
variable: "numba" (jitted loops), "numpy" (tensordot fallback), or "auto"
(numba when importable, else numpy). Both backends implement the same
three entry points and agree bit-for-bit in tests up to float addition
order.
"""

from __future__ import annotations

import os

import numpy as np

from .kernels_numpy import conv_out_hw

_FLAG = os.environ.get("AVALIGN_KERNELS", "auto").strip().lower()
if _FLAG not in ("auto", "numba", "numpy"):
    raise ValueError(f"AVALIGN_KERNELS must be auto|numba|numpy, got {_FLAG!r}")

if _FLAG in ("auto", "numba"):
    try:
        from . import kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:
        if _FLAG == "numba":
            raise
        from . import kernels_numpy as _impl
        BACKEND = "numpy"
else:
    from . import kernels_numpy as _impl
    BACKEND = "numpy"


def _norm_pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride=(1, 1), padding=(0, 0),
                   dilation=(1, 1)) -> np.ndarray:
    """x: (N, Ci, H, W), w: (Co, Ci, kh, kw) -> (N, Co, Ho, Wo)."""
    sh, sw = _norm_pair(stride)
    ph, pw = _norm_pair(padding)
    dh, dw = _norm_pair(dilation)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"bad conv shapes x={x.shape} w={w.shape}")
    if x.dtype != w.dtype:
        raise ValueError(f"conv dtype mismatch {x.dtype} vs {w.dtype}")
    return _impl.conv2d_forward(x, w, sh, sw, ph, pw, dh, dw)


def conv2d_backward_input(gy: np.ndarray, w: np.ndarray, input_hw, stride=(1, 1),
                          padding=(0, 0), dilation=(1, 1)) -> np.ndarray:
    sh, sw = _norm_pair(stride)
    ph, pw = _norm_pair(padding)
    dh, dw = _norm_pair(dilation)
    H, W = input_hw
    return _impl.conv2d_backward_input(gy, w, H, W, sh, sw, ph, pw, dh, dw)


def conv2d_backward_weight(gy: np.ndarray, x: np.ndarray, kernel_hw, stride=(1, 1),
                           padding=(0, 0), dilation=(1, 1)) -> np.ndarray:
    sh, sw = _norm_pair(stride)
    ph, pw = _norm_pair(padding)
    dh, dw = _norm_pair(dilation)
    kh, kw = kernel_hw
    return _impl.conv2d_backward_weight(gy, x, kh, kw, sh, sw, ph, pw, dh, dw)


__all__ = ["BACKEND", "conv_out_hw", "conv2d_forward",
           "conv2d_backward_input", "conv2d_backward_weight"]
