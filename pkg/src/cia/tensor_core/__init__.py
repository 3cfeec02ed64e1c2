"""Dense float32 tensor operations shared by the whole stack.

Tensors are plain numpy arrays (row-major, float32 by default; images are
H x W x C, batches N x H x W x C). Every function here is pure: inputs are
never mutated.

The convolution hot loop has two interchangeable backends, the compiled
``_kernels`` extension and the numpy ``_fallback``. The compiled one is
picked at import when available; set ``CIA_BACKEND=python`` to force the
fallback.
"""

from __future__ import annotations

import os
from typing import Callable

import numpy as np

from . import _fallback

try:
    from . import _kernels as _native
except ImportError:  # extension not built
    _native = None

if os.environ.get("CIA_BACKEND", "").lower() == "python" or _native is None:
    _backend = _fallback
    BACKEND = "python"
else:
    _backend = _native
    BACKEND = "native"

DTYPE = np.float32
PADDINGS = ("replicate", "zero")

__all__ = [
    "BACKEND",
    "DTYPE",
    "as_tensor",
    "elementwise_map",
    "elementwise_binary",
    "conv2d",
    "conv2d_backward_input",
    "conv2d_backward_kernel",
    "matvec",
    "argmax",
    "finite_difference_gradient",
    "use_backend",
]


def use_backend(name: str) -> str:
    """Switch the convolution backend at runtime; returns the previous name."""
    global _backend, BACKEND
    prev = BACKEND
    if name == "python":
        _backend, BACKEND = _fallback, "python"
    elif name == "native":
        if _native is None:
            raise RuntimeError("compiled kernels are not built")
        _backend, BACKEND = _native, "native"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    t = np.asarray(data, dtype=dtype)
    if t.ndim == 0:
        t = t.reshape(1)
    return t


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_grad(x):
    s = _sigmoid(x)
    return s * (1 - s)


_MAPS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x.copy(),
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "sin": np.sin,
    "relu": lambda x: np.maximum(x, 0),
    "exp": np.exp,
    "identity_grad": np.ones_like,
    "tanh_grad": lambda x: 1 - np.tanh(x) ** 2,
    "sigmoid_grad": _sigmoid_grad,
    "sin_grad": np.cos,
    "relu_grad": lambda x: (x > 0).astype(x.dtype),
    "exp_grad": np.exp,
}

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "min": np.minimum,
    "max": np.maximum,
}


def elementwise_map(t, f: str) -> np.ndarray:
    """Apply a named scalar function (or its derivative, ``<name>_grad``)."""
    try:
        fn = _MAPS[f]
    except KeyError:
        raise ValueError(f"unknown elementwise function {f!r}") from None
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.floating):
        t = t.astype(DTYPE)
    return fn(t).astype(t.dtype, copy=False)


def elementwise_binary(a, b, op: str) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown binary op {op!r}") from None
    return fn(a, b)


def _check_conv(x, kernel, padding):
    if padding not in PADDINGS:
        raise ValueError(f"unknown padding {padding!r}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be k x k x C_in x C_out, got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != kernel.shape[2]:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {kernel.shape[2]}")
    return k


def _pad(x, p, padding):
    mode = "edge" if padding == "replicate" else "constant"
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)


def _fold(gxp, p, padding):
    """Adjoint of ``_pad``: route border gradients back onto the edge pixels."""
    if p == 0:
        return gxp
    if padding == "replicate":
        gxp = gxp.copy()
        gxp[:, p, :, :] += gxp[:, :p, :, :].sum(axis=1)
        gxp[:, -p - 1, :, :] += gxp[:, -p:, :, :].sum(axis=1)
        gxp[:, :, p, :] += gxp[:, :, :p, :].sum(axis=2)
        gxp[:, :, -p - 1, :] += gxp[:, :, -p:, :].sum(axis=2)
    return gxp[:, p:-p, p:-p, :]


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected HWC or NHWC tensor, got shape {x.shape}")


def conv2d(x, kernel, padding: str = "replicate", bias=None) -> np.ndarray:
    """"Same" stride-1 cross-correlation of an HWC (or NHWC) image."""
    xb, single = _batched(x)
    kernel = np.asarray(kernel, dtype=xb.dtype)
    k = _check_conv(xb, kernel, padding)
    if bias is None:
        bias = np.zeros(kernel.shape[3], dtype=xb.dtype)
    bias = np.ascontiguousarray(bias, dtype=xb.dtype)
    xp = np.ascontiguousarray(_pad(xb, k // 2, padding))
    out = _backend.valid_conv_forward(xp, np.ascontiguousarray(kernel), bias)
    return out[0] if single else out


def conv2d_backward_input(grad_out, kernel, padding: str = "replicate") -> np.ndarray:
    gb, single = _batched(grad_out)
    kernel = np.ascontiguousarray(kernel, dtype=gb.dtype)
    k = kernel.shape[0]
    gxp = _backend.valid_conv_backward_input(np.ascontiguousarray(gb), kernel)
    gx = _fold(gxp, k // 2, padding)
    return gx[0] if single else np.ascontiguousarray(gx)


def conv2d_backward_kernel(x, grad_out, k: int, padding: str = "replicate") -> np.ndarray:
    xb, _ = _batched(x)
    gb, _ = _batched(grad_out)
    xp = np.ascontiguousarray(_pad(xb, k // 2, padding))
    return _backend.valid_conv_backward_kernel(xp, np.ascontiguousarray(gb, dtype=xp.dtype), k)


def matvec(weights, x, bias) -> np.ndarray:
    """``W @ x + b`` for W of shape (m, n); x may also be a batch (N, n)."""
    weights, x, bias = np.asarray(weights), np.asarray(x), np.asarray(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ValueError(f"dimension mismatch: W{weights.shape} x{x.shape} b{bias.shape}")
    return x @ weights.T + bias


def argmax(t) -> int:
    t = np.asarray(t)
    if t.ndim != 1:
        raise ValueError("argmax expects a rank-1 tensor")
    if t.size == 0:
        raise ValueError("argmax of an empty tensor")
    return int(np.argmax(t))  # numpy returns the first maximum


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Evaluated in the dtype of ``x``; pass float64 input for a low-noise oracle.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, copy=True)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(DTYPE)
    flat = x.reshape(-1)
    grad = np.empty(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape).astype(x.dtype)
