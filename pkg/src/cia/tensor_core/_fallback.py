"""Pure numpy convolution kernels.

All three kernels operate on pre-padded NHWC input ("valid" correlation,
stride 1) and accumulate in float64; results are cast back to the input
dtype. Signatures mirror the compiled ``_kernels`` module exactly.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, k):
    # (N, H, W, C, k, k) view -> (N, H, W, k, k, C)
    return sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)


def valid_conv_forward(xp, w, b):
    k = w.shape[0]
    win = _windows(xp, k).astype(np.float64)
    out = np.tensordot(win, w.astype(np.float64), axes=([3, 4, 5], [0, 1, 2]))
    out += b.astype(np.float64)
    return out.astype(xp.dtype)


def valid_conv_backward_input(gy, w):
    n, h, wd, _ = gy.shape
    k, _, c, _ = w.shape
    gy64 = gy.astype(np.float64)
    w64 = w.astype(np.float64)
    gxp = np.zeros((n, h + k - 1, wd + k - 1, c), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + h, dj:dj + wd, :] += gy64 @ w64[di, dj].T
    return gxp.astype(gy.dtype)


def valid_conv_backward_kernel(xp, gy, k):
    win = _windows(xp, k).astype(np.float64)
    gw = np.tensordot(win, gy.astype(np.float64), axes=([0, 1, 2], [0, 1, 2]))
    return gw.astype(xp.dtype)
