"""Procedural 10-class 32x32 RGB dataset.

Each class is a (shape, hue) archetype; five hues are shared by two
shapes each so neither colour nor outline alone identifies the class.
Every image draws its own jitter (position, scale, hue, saturation,
brightness, background) and additive Gaussian noise from a SplitMix64
stream seeded by (seed, split, index), then is quantized to 8 bits.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..prng import SplitMix64, derive_seed

NUM_CLASSES = 10
SIZE = 32
NOISE_SIGMA = 0.05
CLASS_NAMES = ("disk", "square", "triangle", "ring", "plus", "hbar", "vbar", "diamond", "cross", "frame")
_HUES = (0.0, 0.2, 0.4, 0.6, 0.8)
_SPLIT_ID = {"train": 1, "test": 2}
_SS = 2  # supersampling factor for anti-aliased edges


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    box = np.maximum(au, av)
    if cls == 0:
        return u * u + v * v <= 1.0
    if cls == 1:
        return box <= 0.8
    if cls == 2:
        return (v <= 0.8) & (au <= (v + 0.9) * 0.55)
    if cls == 3:
        rr = u * u + v * v
        return (rr <= 1.0) & (rr >= 0.36)
    if cls == 4:
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if cls == 5:
        return (au <= 1.0) & (av <= 0.35)
    if cls == 6:
        return (av <= 1.0) & (au <= 0.35)
    if cls == 7:
        return au + av <= 1.0
    if cls == 8:
        return ((np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4)) & (box <= 0.85)
    if cls == 9:
        return (box <= 0.9) & (box >= 0.55)
    raise ValueError(f"no archetype for class {cls}")


def render(cls: int, rng: SplitMix64) -> np.ndarray:
    """One float image in [0, 1] (before quantization)."""
    cy, cx = (SIZE / 2 + rng.uniform(-5, 5) for _ in range(2))
    radius = rng.uniform(8.0, 12.0)
    hue = (_HUES[cls % 5] + rng.uniform(-0.04, 0.04)) % 1.0
    fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)))
    level = rng.uniform(0.1, 0.9)
    bg = np.clip(level + np.array([rng.uniform(-0.08, 0.08) for _ in range(3)]), 0, 1)

    coords = (np.arange(SIZE * _SS) + 0.5) / _SS
    v, u = np.meshgrid((coords - cy) / radius, (coords - cx) / radius, indexing="ij")
    cover = _shape_mask(cls, u, v).astype(np.float64)
    cover = cover.reshape(SIZE, _SS, SIZE, _SS).mean(axis=(1, 3))[..., None]
    img = cover * fg + (1 - cover) * bg
    img = img + NOISE_SIGMA * rng.normal_block(img.size).reshape(img.shape)
    return np.clip(img, 0.0, 1.0)


def quantize8(img) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-away-from-zero."""
    return np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # uint8, N x 32 x 32 x 3
    labels: np.ndarray
    split: str
    seed: int

    def __len__(self):
        return len(self.labels)

    def floats(self, idx=slice(None)) -> np.ndarray:
        return self.images[idx].astype(np.float32) / np.float32(255)


def _generate_split(seed: int, split: str, n: int) -> Dataset:
    labels = np.arange(n, dtype=np.int64) % NUM_CLASSES
    images = np.empty((n, SIZE, SIZE, 3), dtype=np.uint8)
    for i in range(n):
        rng = SplitMix64(derive_seed(seed, _SPLIT_ID[split], i))
        images[i] = quantize8(render(int(labels[i]), rng))
    return Dataset(images, labels, split, seed)


def generate_dataset(seed: int, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    if n_train <= 0 or n_test <= 0:
        raise ValueError("sample counts must be positive")
    return _generate_split(seed, "train", n_train), _generate_split(seed, "test", n_test)


def save_dataset(path, train: Dataset, test: Dataset) -> None:
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            train_images=train.images,
            train_labels=train.labels,
            test_images=test.images,
            test_labels=test.labels,
            seed=np.int64(train.seed),
        )


def load_dataset(path) -> tuple[Dataset, Dataset]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with np.load(path) as z:
        seed = int(z["seed"])
        return (
            Dataset(z["train_images"], z["train_labels"], "train", seed),
            Dataset(z["test_images"], z["test_labels"], "test", seed),
        )
