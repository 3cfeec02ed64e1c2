"""SplitMix64 pseudo-random generator.

SplitMix64 is counter based: the n-th output is ``mix(seed + n * GAMMA)``.
That makes bulk generation vectorizable with numpy while staying
bit-identical to the scalar sequence, which is what dataset generation,
weight init and target selection rely on.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (order sensitive)."""
    h = 0
    for p in parts:
        h = mix64(h ^ (int(p) & MASK64) ^ GAMMA)
    return h


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def next_float(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * self.next_float()

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return int(self.next_float() * n)

    def u64_block(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a uint64 array, identical to ``n`` calls of next_u64."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def float_block(self, n: int) -> np.ndarray:
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform_block(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return lo + (hi - lo) * self.float_block(n)

    def normal_block(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; consumes 2 * ceil(n / 2) outputs."""
        half = (n + 1) // 2
        u = self.float_block(2 * half)
        u1 = 1.0 - u[:half]  # (0, 1], keeps log finite
        u2 = u[half:]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        keys = self.u64_block(n)
        return np.argsort(keys, kind="stable")
