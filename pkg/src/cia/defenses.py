"""Input-transform defenses: mean smoothing, a differentiable JPEG
approximation, and a block-DCT lossy codec for evaluation.

Smoothing and the JPEG approximation also exist as layer lists
(:func:`defense_as_layers`) so an attacker can fold them into the network
being attacked. The codec deliberately has no layer form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netlib
from . import tensor_core as tc

# Full-range (JFIF) RGB -> YCbCr, values in [0, 1] with chroma offset 0.5.
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)
YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])

# Base quantization tables (JPEG standard, informative annex K).
LUMA_QUANT = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ]
)
CHROMA_QUANT = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ]
)

_PAD_CODE = {"zero": 0, "replicate": 1}
_PAD_NAME = {v: k for k, v in _PAD_CODE.items()}


@dataclass(frozen=True)
class SmoothingSpec:
    kernel_size: int = 3
    kind: str = "mean"
    padding: str = "replicate"

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"smoothing kernel size must be odd, got {self.kernel_size}")
        if self.kind != "mean":
            raise ValueError(f"unsupported smoothing kind {self.kind!r}")
        if self.padding not in _PAD_CODE:
            raise ValueError(f"unknown padding {self.padding!r}")


@dataclass(frozen=True)
class JpegApproxSpec:
    luma_kernel: int = 3
    chroma_kernel: int = 6
    padding: str = "replicate"

    def __post_init__(self):
        if self.luma_kernel < 1 or self.chroma_kernel < 1:
            raise ValueError("kernel sizes must be positive")
        if self.padding not in _PAD_CODE:
            raise ValueError(f"unknown padding {self.padding!r}")


@dataclass(frozen=True)
class JpegCodecSpec:
    quality: int = 75

    def __post_init__(self):
        if not 1 <= int(self.quality) <= 100:
            raise ValueError(f"JPEG quality must be in [1, 100], got {self.quality}")


# ------------------------------------------------------------- smoothing


def mean_kernel(k: int, channels: int, dtype=tc.DTYPE) -> np.ndarray:
    """Depthwise uniform k x k kernel laid out as k x k x C x C."""
    kernel = np.zeros((k, k, channels, channels), dtype=dtype)
    for c in range(channels):
        kernel[:, :, c, c] = 1.0 / (k * k)
    return kernel


def _spatial(img) -> tuple[int, int]:
    img = np.asarray(img)
    if img.ndim not in (3, 4):
        raise ValueError(f"expected HWC or NHWC image, got shape {img.shape}")
    return img.shape[-3], img.shape[-2]


def mean_filter(img, spec: SmoothingSpec = SmoothingSpec()) -> np.ndarray:
    img = np.asarray(img)
    h, w = _spatial(img)
    if spec.kernel_size > min(h, w):
        raise ValueError(f"kernel {spec.kernel_size} larger than image {h}x{w}")
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else tc.DTYPE
    return tc.conv2d(img.astype(dtype, copy=False), mean_kernel(spec.kernel_size, img.shape[-1], dtype), spec.padding)


# --------------------------------------------------------------- colour


def _check_rgb(img):
    img = np.asarray(img)
    if img.shape[-1] != 3:
        raise ValueError(f"colour conversion needs 3 channels, got {img.shape[-1]}")
    return img


def rgb_to_ycbcr(img) -> np.ndarray:
    img = _check_rgb(img)
    m = RGB_TO_YCBCR.astype(img.dtype)
    return img @ m.T + YCBCR_OFFSET.astype(img.dtype)


def ycbcr_to_rgb(img) -> np.ndarray:
    img = _check_rgb(img)
    m = YCBCR_TO_RGB.astype(img.dtype)
    return (img - YCBCR_OFFSET.astype(img.dtype)) @ m.T


# ---------------------------------------------------------- box filters


def _box_1d(x, k, axis, padding):
    """Mean over a k-window along ``axis``; window offsets -k//2 .. k-1-k//2."""
    if k == 1:
        return x.astype(np.float64)
    before, after = k // 2, k - 1 - k // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (before, after)
    xp = np.pad(x.astype(np.float64), pad, mode="edge" if padding == "replicate" else "constant")
    n = x.shape[axis]
    acc = np.zeros(x.shape, dtype=np.float64)
    for s in range(k):
        acc += np.take(xp, np.arange(s, s + n), axis=axis)
    return acc / k


def _box_1d_adjoint(g, k, axis, padding):
    if k == 1:
        return g.astype(np.float64)
    before = k // 2
    n = g.shape[axis]
    shape = list(g.shape)
    shape[axis] = n + k - 1
    gp = np.zeros(shape, dtype=np.float64)
    g = g.astype(np.float64) / k
    idx = [slice(None)] * g.ndim
    for s in range(k):
        idx[axis] = slice(s, s + n)
        gp[tuple(idx)] += g
    gp = np.moveaxis(gp, axis, 0)
    if padding == "replicate":
        gp[before] += gp[:before].sum(axis=0)
        gp[before + n - 1] += gp[before + n:].sum(axis=0)
    return np.moveaxis(gp[before:before + n], 0, axis)


def box_filter(img, sizes, padding: str = "replicate") -> np.ndarray:
    """Per-channel separable mean filter; ``sizes[c]`` may be even."""
    img = np.asarray(img)
    if len(sizes) != img.shape[-1]:
        raise ValueError(f"{len(sizes)} kernel sizes for {img.shape[-1]} channels")
    h, w = _spatial(img)
    if max(sizes) > min(h, w):
        raise ValueError(f"kernel {max(sizes)} larger than image {h}x{w}")
    out = np.empty(img.shape, dtype=img.dtype)
    for c, k in enumerate(sizes):
        ch = img[..., c]
        out[..., c] = _box_1d(_box_1d(ch, k, ch.ndim - 2, padding), k, ch.ndim - 1, padding)
    return out


def box_filter_adjoint(grad, sizes, padding: str = "replicate") -> np.ndarray:
    grad = np.asarray(grad)
    out = np.empty(grad.shape, dtype=grad.dtype)
    for c, k in enumerate(sizes):
        g = grad[..., c]
        out[..., c] = _box_1d_adjoint(_box_1d_adjoint(g, k, g.ndim - 1, padding), k, g.ndim - 2, padding)
    return out


# ------------------------------------------------------- JPEG approximation


def jpeg_approx(img, spec: JpegApproxSpec = JpegApproxSpec()) -> np.ndarray:
    """YCbCr, wide chroma / narrow luma mean filters, back to RGB, clamp."""
    img = _check_rgb(img)
    sizes = (spec.luma_kernel, spec.chroma_kernel, spec.chroma_kernel)
    return np.clip(ycbcr_to_rgb(box_filter(rgb_to_ycbcr(img), sizes, spec.padding)), 0, 1)


def defense_as_layers(spec) -> list[netlib.Layer]:
    """Layer form of a differentiable defense, for :func:`netlib.prepend`."""
    if isinstance(spec, JpegCodecSpec):
        raise TypeError("non-differentiable defense: the JPEG codec has no layer form")
    if isinstance(spec, SmoothingSpec):
        return [netlib.Conv(mean_kernel(spec.kernel_size, 3), None, spec.padding)]
    if isinstance(spec, JpegApproxSpec):
        return [
            netlib.FixedTransform("rgb_to_ycbcr"),
            netlib.FixedTransform(
                "box_filter", (_PAD_CODE[spec.padding], spec.luma_kernel, spec.chroma_kernel, spec.chroma_kernel)
            ),
            netlib.FixedTransform("ycbcr_to_rgb"),
            netlib.FixedTransform("clamp01"),
        ]
    raise TypeError(f"unknown defense spec {spec!r}")


def _rgb_shape(shape, params):
    if len(shape) != 3 or shape[2] != 3:
        raise netlib.ShapeInconsistencyError(f"colour transform needs H x W x 3, got {shape}")


def _box_shape(shape, params):
    if len(params) < 2 or params[0] not in _PAD_NAME:
        raise netlib.ShapeInconsistencyError(f"bad box_filter parameters {params}")
    if len(shape) != 3 or shape[2] != len(params) - 1:
        raise netlib.ShapeInconsistencyError(f"box_filter has {len(params) - 1} channel sizes, input is {shape}")
    if max(params[1:]) > min(shape[0], shape[1]):
        raise netlib.ShapeInconsistencyError("box_filter kernel larger than image")


netlib.register_transform(
    "rgb_to_ycbcr",
    netlib.TransformDef(
        2, lambda x, p: rgb_to_ycbcr(x), lambda g, x, p: g @ RGB_TO_YCBCR.astype(g.dtype), _rgb_shape
    ),
)
netlib.register_transform(
    "ycbcr_to_rgb",
    netlib.TransformDef(
        3, lambda x, p: ycbcr_to_rgb(x), lambda g, x, p: g @ YCBCR_TO_RGB.astype(g.dtype), _rgb_shape
    ),
)
netlib.register_transform(
    "box_filter",
    netlib.TransformDef(
        4,
        lambda x, p: box_filter(x, p[1:], _PAD_NAME[p[0]]),
        lambda g, x, p: box_filter_adjoint(g, p[1:], _PAD_NAME[p[0]]),
        _box_shape,
    ),
)


# ------------------------------------------------------------ JPEG codec


def scaled_quant_table(base, quality: int) -> np.ndarray:
    """Quality-scaled quantization table (IJG convention), entries in [1, 255]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((np.asarray(base, dtype=np.int64) * scale + 50) // 100, 1, 255)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix: coefficients = D @ block @ D.T."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


_DCT8 = dct_matrix(8)


def block_dct(blocks: np.ndarray) -> np.ndarray:
    """DCT-II of every trailing 8 x 8 block."""
    return _DCT8 @ blocks @ _DCT8.T


def block_idct(coefs: np.ndarray) -> np.ndarray:
    return _DCT8.T @ coefs @ _DCT8


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


_LEVEL_SHIFT = np.array([128.0, 0.0, 0.0])


def jpeg_encode_decode(img, spec: JpegCodecSpec | int = JpegCodecSpec()) -> np.ndarray:
    """Lossy core of baseline JPEG: YCbCr, 8x8 DCT, quantize, dequantize, invert.

    No chroma subsampling and no entropy coding (the latter is lossless).
    """
    if not isinstance(spec, JpegCodecSpec):
        spec = JpegCodecSpec(int(spec))
    img = _check_rgb(img)
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else tc.DTYPE
    single = img.ndim == 3
    x = img[None] if single else img
    n, h, w, _ = x.shape
    ph, pw = -h % 8, -w % 8
    # 8-bit level shift: luma by -128, chroma already centred once the 0.5 offset is removed
    ycc = (rgb_to_ycbcr(x.astype(np.float64)) - YCBCR_OFFSET) * 255.0 - _LEVEL_SHIFT
    ycc = np.pad(ycc, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    hb, wb = (h + ph) // 8, (w + pw) // 8
    blocks = ycc.reshape(n, hb, 8, wb, 8, 3).transpose(0, 1, 3, 5, 2, 4)  # n, hb, wb, c, 8, 8
    tables = np.stack(
        [scaled_quant_table(LUMA_QUANT, spec.quality)] + [scaled_quant_table(CHROMA_QUANT, spec.quality)] * 2
    ).astype(np.float64)
    coefs = block_dct(blocks)
    coefs = round_half_away(coefs / tables) * tables
    rec = block_idct(coefs).transpose(0, 1, 4, 2, 5, 3).reshape(n, hb * 8, wb * 8, 3)[:, :h, :w]
    out = np.clip(ycbcr_to_rgb((rec + _LEVEL_SHIFT) / 255.0 + YCBCR_OFFSET), 0, 1).astype(dtype)
    return out[0] if single else out


def apply_defense(img, spec) -> np.ndarray:
    """Evaluation-time application of any defense spec (``None`` = no defense)."""
    if spec is None:
        return np.asarray(img)
    if isinstance(spec, SmoothingSpec):
        return mean_filter(img, spec)
    if isinstance(spec, JpegApproxSpec):
        return jpeg_approx(img, spec)
    if isinstance(spec, JpegCodecSpec):
        return jpeg_encode_decode(img, spec)
    raise TypeError(f"unknown defense spec {spec!r}")
