"""Small feed-forward image classifiers with input-gradient backprop.

A :class:`Network` is an ordered tuple of layers ending in an m-vector of
logits. Layers work on batches (N x H x W x C or N x n); single samples are
promoted by :func:`forward` and :func:`backward_input`. Weights are frozen
(read-only arrays) once a network is built, trained or loaded.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc
from .prng import SplitMix64

MAGIC = b"CIAN"
VERSION = 1


class ModelFormatError(ValueError):
    """Base class for model file problems."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ShapeInconsistencyError(ModelFormatError):
    pass


def _frozen(a, dtype=tc.DTYPE) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------- layers


class Layer:
    kind: str = ""
    tag: int = 0
    param_names: tuple[str, ...] = ()

    def params(self) -> tuple[np.ndarray, ...]:
        return ()

    def with_params(self, params: Sequence[np.ndarray]) -> "Layer":
        return self

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, gy: np.ndarray, cache, need_input: bool = True):
        """Return ``(grad_input, param_grads)``."""
        raise NotImplementedError

    def astype(self, dtype) -> "Layer":
        return self.with_params([p.astype(dtype) for p in self.params()])

    def sharing(self, params: Sequence[np.ndarray]) -> "Layer":
        """Shallow copy whose parameters alias ``params`` (used while training)."""
        clone = copy.copy(self)
        for name, p in zip(self.param_names, params):
            setattr(clone, name, p)
        return clone


class Conv(Layer):
    kind, tag = "conv", 1
    param_names = ("kernel", "bias")

    def __init__(self, kernel, bias=None, padding: str = "zero"):
        kernel = np.asarray(kernel)
        if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
            raise ShapeInconsistencyError(f"conv kernel must be odd k x k x C_in x C_out, got {kernel.shape}")
        if padding not in tc.PADDINGS:
            raise ValueError(f"unknown padding {padding!r}")
        dtype = kernel.dtype if np.issubdtype(kernel.dtype, np.floating) else tc.DTYPE
        self.kernel = _frozen(kernel, dtype)
        self.bias = _frozen(np.zeros(kernel.shape[3]) if bias is None else bias, dtype)
        if self.bias.shape != (kernel.shape[3],):
            raise ShapeInconsistencyError("conv bias length must equal C_out")
        self.padding = padding

    @property
    def k(self) -> int:
        return self.kernel.shape[0]

    def params(self):
        return (self.kernel, self.bias)

    def with_params(self, params):
        return Conv(params[0], params[1], self.padding)

    def output_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.kernel.shape[2]:
            raise ShapeInconsistencyError(f"conv expects H x W x {self.kernel.shape[2]}, got {shape}")
        return (shape[0], shape[1], self.kernel.shape[3])

    def forward(self, x):
        return tc.conv2d(x, self.kernel, self.padding, self.bias), x

    def backward(self, gy, x, need_input=True):
        gx = tc.conv2d_backward_input(gy, self.kernel, self.padding) if need_input else None
        gk = tc.conv2d_backward_kernel(x, gy, self.k, self.padding)
        return gx, (gk, gy.sum(axis=(0, 1, 2), dtype=np.float64).astype(gy.dtype))


class ReLU(Layer):
    kind, tag = "relu", 2

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        return np.maximum(x, 0), x > 0

    def backward(self, gy, mask, need_input=True):
        return gy * mask, ()


class Dense(Layer):
    kind, tag = "dense", 3
    param_names = ("weight", "bias")

    def __init__(self, weight, bias=None):
        weight = np.asarray(weight)
        if weight.ndim != 2:
            raise ShapeInconsistencyError(f"dense weight must be n_out x n_in, got {weight.shape}")
        dtype = weight.dtype if np.issubdtype(weight.dtype, np.floating) else tc.DTYPE
        self.weight = _frozen(weight, dtype)
        self.bias = _frozen(np.zeros(weight.shape[0]) if bias is None else bias, dtype)
        if self.bias.shape != (weight.shape[0],):
            raise ShapeInconsistencyError("dense bias length must equal n_out")

    def params(self):
        return (self.weight, self.bias)

    def with_params(self, params):
        return Dense(params[0], params[1])

    def output_shape(self, shape):
        if shape != (self.weight.shape[1],):
            raise ShapeInconsistencyError(f"dense expects ({self.weight.shape[1]},), got {shape}")
        return (self.weight.shape[0],)

    def forward(self, x):
        return tc.matvec(self.weight, x, self.bias), x

    def backward(self, gy, x, need_input=True):
        gx = gy @ self.weight if need_input else None
        return gx, (gy.T @ x, gy.sum(axis=0))


class Flatten(Layer):
    kind, tag = "flatten", 4

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, shape, need_input=True):
        return gy.reshape(shape), ()


class AvgPool(Layer):
    kind, tag = "avgpool", 5

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("pool size must be positive")
        self.k = int(k)

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] % self.k or shape[1] % self.k:
            raise ShapeInconsistencyError(f"avgpool({self.k}) cannot tile {shape}")
        return (shape[0] // self.k, shape[1] // self.k, shape[2])

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.k
        return x.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4)), x.shape

    def backward(self, gy, shape, need_input=True):
        k = self.k
        g = np.repeat(np.repeat(gy, k, axis=1), k, axis=2) / (k * k)
        return g.astype(gy.dtype), ()


@dataclass(frozen=True)
class TransformDef:
    """A parameter-free differentiable map usable as a layer."""

    tag: int
    forward: Callable[[np.ndarray, tuple], np.ndarray]
    backward: Callable[[np.ndarray, np.ndarray, tuple], np.ndarray]
    check_shape: Callable[[tuple, tuple], None] = lambda shape, params: None


def _clamp_backward(gy, x, params):
    return gy * ((x >= 0) & (x <= 1))


TRANSFORMS: dict[str, TransformDef] = {
    "identity": TransformDef(0, lambda x, p: x, lambda gy, x, p: gy),
    "clamp01": TransformDef(1, lambda x, p: np.clip(x, 0, 1), _clamp_backward),
}


def register_transform(name: str, definition: TransformDef) -> None:
    TRANSFORMS[name] = definition


def _lookup_transform(name: str) -> TransformDef:
    if name not in TRANSFORMS:
        from . import defenses  # noqa: F401  registers the image transforms

    try:
        return TRANSFORMS[name]
    except KeyError:
        raise ValueError(f"unknown fixed transform {name!r}") from None


def _transform_by_tag(tag: int) -> str:
    _lookup_transform("rgb_to_ycbcr")
    for name, d in TRANSFORMS.items():
        if d.tag == tag:
            return name
    raise ShapeInconsistencyError(f"unknown fixed transform tag {tag}")


class FixedTransform(Layer):
    kind, tag = "fixed_transform", 6

    def __init__(self, transform_id: str, params: tuple[int, ...] = ()):
        self.transform_id = transform_id
        self.transform_params = tuple(int(p) for p in params)
        self._def = _lookup_transform(transform_id)

    def output_shape(self, shape):
        self._def.check_shape(shape, self.transform_params)
        return shape

    def forward(self, x):
        return self._def.forward(x, self.transform_params), x

    def backward(self, gy, x, need_input=True):
        return self._def.backward(gy, x, self.transform_params), ()

    def __repr__(self):
        return f"FixedTransform({self.transform_id!r}, {self.transform_params})"


# --------------------------------------------------------------- network


@dataclass(frozen=True)
class ClassifierOutput:
    logits: np.ndarray
    probs: np.ndarray
    predicted_class: int | np.ndarray


class Network:
    def __init__(self, layers: Sequence[Layer], num_classes: int, input_shape: tuple[int, ...]):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.layers = tuple(layers)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeInconsistencyError as e:
                raise ShapeInconsistencyError(f"layer {i} ({layer.kind}): {e}") from None
        if shape != (self.num_classes,):
            raise ShapeInconsistencyError(f"network outputs {shape}, expected ({self.num_classes},)")

    def __repr__(self):
        kinds = ", ".join(l.kind for l in self.layers)
        return f"Network(input={self.input_shape}, m={self.num_classes}, layers=[{kinds}])"

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(tc.DTYPE)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] == self.input_shape:
            return x, False
        raise ValueError(f"input shape {x.shape} does not match network input {self.input_shape}")

    def logits(self, x) -> np.ndarray:
        """Batched logits (N x m) without keeping caches."""
        h, _ = self._batch(x)
        for layer in self.layers:
            h, _ = layer.forward(h)
        return h

    def forward_cached(self, xb: np.ndarray):
        caches = []
        h = xb
        for layer in self.layers:
            h, cache = layer.forward(h)
            caches.append(cache)
        return h, caches

    def backward(self, caches, grad_logits, param_grads: bool = False):
        """Reverse traversal; returns ``(grad_input, [param grads per layer])``."""
        g = grad_logits
        grads: list = [()] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            need_input = not param_grads or i > 0
            g, pg = self.layers[i].backward(g, caches[i], need_input)
            if param_grads:
                grads[i] = pg
        return g, grads

    def astype(self, dtype) -> "Network":
        """Copy with parameters cast (float64 copies serve as gradient-check oracles)."""
        return Network([l.astype(dtype) for l in self.layers], self.num_classes, self.input_shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(net: Network, x) -> ClassifierOutput:
    xb, single = net._batch(x)
    logits = net.logits(xb)
    probs = softmax(logits)
    pred = probs.argmax(axis=-1)
    if single:
        return ClassifierOutput(logits[0], probs[0], int(pred[0]))
    return ClassifierOutput(logits, probs, pred)


def cross_entropy(logits, cls):
    """Log-sum-exp stabilized cross-entropy and its gradient w.r.t. the logits.

    Accepts a single logit vector with an int class, or a batch (N x m)
    with an array of N classes (per-sample losses are returned).
    """
    logits = np.asarray(logits)
    m = logits.shape[-1]
    cls_arr = np.asarray(cls)
    if np.any(cls_arr < 0) or np.any(cls_arr >= m):
        raise ValueError(f"class index out of range [0, {m})")
    single = logits.ndim == 1
    lb = logits[None] if single else logits
    cb = np.atleast_1d(cls_arr).astype(np.int64)
    if cb.shape[0] != lb.shape[0]:
        raise ValueError("one class index per logit row is required")
    rows = np.arange(lb.shape[0])
    ls = log_softmax(lb)
    loss = -ls[rows, cb]
    grad = np.exp(ls)
    grad[rows, cb] -= 1
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def backward_input(net: Network, x, grad_logits) -> np.ndarray:
    xb, single = net._batch(x)
    grad_logits = np.asarray(grad_logits, dtype=xb.dtype)
    expected = (xb.shape[0], net.num_classes)
    gl = grad_logits.reshape(1, -1) if single else grad_logits
    if gl.shape != expected:
        raise ValueError(f"grad_logits shape {grad_logits.shape} does not match {expected}")
    _, caches = net.forward_cached(xb)
    gx, _ = net.backward(caches, gl)
    return gx[0] if single else gx


def loss_and_input_grad(net: Network, xb: np.ndarray, classes: np.ndarray):
    """Per-sample cross-entropy losses and their input gradients in one pass."""
    logits, caches = net.forward_cached(xb)
    loss, gl = cross_entropy(logits, classes)
    gx, _ = net.backward(caches, gl.astype(xb.dtype))
    return loss, gx, logits


def prepend(net: Network, layers: Sequence[Layer]) -> Network:
    """F' = F o D: insert ``layers`` in front; the original network is untouched."""
    layers = list(layers)
    shape = net.input_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    if shape != net.input_shape:
        raise ShapeInconsistencyError(f"prepended layers output {shape}, network expects {net.input_shape}")
    return Network(layers + list(net.layers), net.num_classes, net.input_shape)


# --------------------------------------------------------------- building


ARCH_VARIANTS = {
    # name: (conv1 width, conv2 width, dense width, extra dense width)
    "A": (8, 16, 64, 0),
    "B": (12, 16, 64, 0),
    "C": (8, 24, 64, 0),
    "D": (8, 16, 96, 0),
    "E": (8, 16, 64, 32),
}


def _glorot(rng: SplitMix64, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    return rng.uniform_block(n, -s, s).astype(tc.DTYPE).reshape(shape)


def build_network(variant: str = "A", seed: int = 0, input_shape=(32, 32, 3), num_classes: int = 10) -> Network:
    """Freshly initialized reference classifier (or one of its variants)."""
    try:
        c1, c2, d1, d2 = ARCH_VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown arch variant {variant!r}; choose from {sorted(ARCH_VARIANTS)}") from None
    h, w, c = input_shape
    rng = SplitMix64(seed)
    layers: list[Layer] = [
        Conv(_glorot(rng, (3, 3, c, c1), 9 * c, 9 * c1), padding="zero"),
        ReLU(),
        AvgPool(2),
        Conv(_glorot(rng, (3, 3, c1, c2), 9 * c1, 9 * c2), padding="zero"),
        ReLU(),
        AvgPool(2),
        Flatten(),
    ]
    n_flat = (h // 4) * (w // 4) * c2
    layers += [Dense(_glorot(rng, (d1, n_flat), n_flat, d1)), ReLU()]
    last = d1
    if d2:
        layers += [Dense(_glorot(rng, (d2, d1), d1, d2)), ReLU()]
        last = d2
    layers.append(Dense(_glorot(rng, (num_classes, last), last, num_classes)))
    return Network(layers, num_classes, input_shape)


# --------------------------------------------------------------- training


def train(
    net: Network,
    dataset,
    epochs: int = 10,
    batch: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    log: Callable[[str], None] | None = None,
) -> Network:
    """Minibatch Adam on mean cross-entropy; deterministic given ``seed``.

    ``dataset`` is an ``(images, labels)`` pair or any object with
    ``images``/``labels`` attributes.
    """
    images, labels = (dataset.images, dataset.labels) if hasattr(dataset, "images") else dataset
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(tc.DTYPE) / 255
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if np.any(labels < 0) or np.any(labels >= net.num_classes):
        raise ValueError("dataset labels out of range")

    params = [[np.array(p, copy=True) for p in layer.params()] for layer in net.layers]
    m = [[np.zeros_like(p) for p in ps] for ps in params]
    v = [[np.zeros_like(p) for p in ps] for ps in params]
    rng = SplitMix64(seed)
    work = Network([l.sharing(ps) for l, ps in zip(net.layers, params)], net.num_classes, net.input_shape)
    t = 0
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            logits, caches = work.forward_cached(images[idx])
            loss, gl = cross_entropy(logits, labels[idx])
            total += float(loss.sum())
            _, grads = work.backward(caches, (gl / len(idx)).astype(logits.dtype), param_grads=True)
            t += 1
            b1t, b2t = 1 - beta1**t, 1 - beta2**t
            for ps, gs, ms, vs in zip(params, grads, m, v):
                for p, g, mi, vi in zip(ps, gs, ms, vs):
                    mi *= beta1
                    mi += (1 - beta1) * g
                    vi *= beta2
                    vi += (1 - beta2) * (g * g)
                    p -= (lr * (mi / b1t) / (np.sqrt(vi / b2t) + eps)).astype(p.dtype)
        if log:
            log(f"epoch {epoch + 1}/{epochs} loss {total / n:.4f}")
    return Network([l.with_params(ps) for l, ps in zip(net.layers, params)], net.num_classes, net.input_shape)


def accuracy(net: Network, images, labels, batch: int = 500) -> float:
    images = np.asarray(images)
    preds = []
    for s in range(0, len(images), batch):
        chunk = images[s:s + batch]
        if chunk.dtype == np.uint8:
            chunk = chunk.astype(tc.DTYPE) / 255
        preds.append(net.logits(chunk).argmax(axis=-1))
    return float(np.mean(np.concatenate(preds) == np.asarray(labels)))


# ---------------------------------------------------------- serialization

_PADDING_CODE = {"zero": 0, "replicate": 1}
_LAYER_TAGS = {1: "conv", 2: "relu", 3: "dense", 4: "flatten", 5: "avgpool", 6: "fixed_transform"}


def to_bytes(net: Network) -> bytes:
    out = [MAGIC, struct.pack("<6I", VERSION, net.num_classes, *net.input_shape, len(net.layers))]
    for layer in net.layers:
        out.append(struct.pack("<B", layer.tag))
        if isinstance(layer, Conv):
            k, cin, cout = layer.kernel.shape[0], layer.kernel.shape[2], layer.kernel.shape[3]
            out.append(struct.pack("<4I", k, cin, cout, _PADDING_CODE[layer.padding]))
        elif isinstance(layer, Dense):
            out.append(struct.pack("<2I", layer.weight.shape[1], layer.weight.shape[0]))
        elif isinstance(layer, AvgPool):
            out.append(struct.pack("<I", layer.k))
        elif isinstance(layer, FixedTransform):
            p = layer.transform_params
            out.append(struct.pack(f"<2I{len(p)}I", layer._def.tag, len(p), *p))
        for arr in layer.params():
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"unexpected end of file at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def u32(self) -> int:
        return self.u32s(1)[0]

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(tc.DTYPE).reshape(shape)


def from_bytes(data: bytes) -> Network:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("bad magic: not a CIAN model file")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"unsupported model version {version} (expected {VERSION})")
    m, h, w, c, count = r.u32s(5)
    layers: list[Layer] = []
    codes = {v: k for k, v in _PADDING_CODE.items()}
    for _ in range(count):
        (tag,) = struct.unpack("<B", r.take(1))
        kind = _LAYER_TAGS.get(tag)
        if kind == "conv":
            k, cin, cout, pad = r.u32s(4)
            if pad not in codes:
                raise ShapeInconsistencyError(f"unknown padding code {pad}")
            kernel = r.floats((k, k, cin, cout))
            layers.append(Conv(kernel, r.floats((cout,)), codes[pad]))
        elif kind == "dense":
            n_in, n_out = r.u32s(2)
            weight = r.floats((n_out, n_in))
            layers.append(Dense(weight, r.floats((n_out,))))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "avgpool":
            layers.append(AvgPool(r.u32()))
        elif kind == "fixed_transform":
            ttag, nparams = r.u32s(2)
            layers.append(FixedTransform(_transform_by_tag(ttag), r.u32s(nparams)))
        else:
            raise ShapeInconsistencyError(f"unknown layer tag {tag}")
    if r.pos != len(data):
        raise ShapeInconsistencyError(f"{len(data) - r.pos} trailing bytes after last layer")
    return Network(layers, m, (h, w, c))


def save(net: Network, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load(path) -> Network:
    return from_bytes(Path(path).read_bytes())
