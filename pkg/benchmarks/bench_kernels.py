"""Compare the compiled convolution kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Times the three convolution primitives at the shapes the reference networks
use, plus one full attack gradient evaluation, under each backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cia import attack, netlib
from cia import tensor_core as tc

SHAPES = [
    # N, H, C_in, C_out   (3x3 kernels, square images)
    (100, 32, 3, 8),
    (100, 16, 8, 16),
    (100, 16, 12, 24),
    (1, 32, 3, 3),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_backend(name, repeat):
    tc.use_backend(name)
    rng = np.random.default_rng(0)
    rows = []
    for n, h, c, co in SHAPES:
        x = rng.random((n, h, h, c), dtype=np.float32)
        w = rng.normal(size=(3, 3, c, co)).astype(np.float32)
        g = rng.normal(size=(n, h, h, co)).astype(np.float32)
        rows.append((
            f"conv {n}x{h}x{h}x{c}->{co}",
            best_of(lambda: tc.conv2d(x, w, "zero"), repeat),
            best_of(lambda: tc.conv2d_backward_input(g, w, "zero"), repeat),
            best_of(lambda: tc.conv2d_backward_kernel(x, g, 3, "zero"), repeat),
        ))
    net = netlib.build_network("A", seed=0)
    obj = attack.ObjectiveSpec.single(net)
    x = rng.random((100, 32, 32, 3), dtype=np.float32)
    dom = attack.center_domain(x, attack.PerturbationBudget.from_int(16))
    r = np.zeros_like(x)
    cls = np.arange(100) % 10
    step = best_of(lambda: attack.attack_loss_and_grad(obj, dom, r, attack.SquashFn(), "targeted", cls), repeat)
    rows.append(("attack gradient, 100 images", step, float("nan"), float("nan")))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["python"]
    try:
        from cia.tensor_core import _kernels  # noqa: F401

        backends.insert(0, "native")
    except ImportError:
        print("compiled kernels not built; timing the fallback only")
    prev = tc.BACKEND
    results = {b: bench_backend(b, args.repeat) for b in backends}
    tc.use_backend(prev)

    print(f"{'case':32s} {'backend':8s} {'forward':>10s} {'bwd input':>10s} {'bwd kernel':>10s}")
    for i, row in enumerate(results[backends[0]]):
        for b in backends:
            label, *ts = results[b][i]
            cells = " ".join(f"{t * 1e3:9.2f}ms" if t == t else f"{'-':>11s}" for t in ts)
            print(f"{label if b == backends[0] else '':32s} {b:8s} {cells}")
    if len(backends) == 2:
        tot = {b: sum(t for row in results[b] for t in row[1:] if t == t) for b in backends}
        print(f"\ntotal speedup native vs python: {tot['python'] / tot['native']:.2f}x")


if __name__ == "__main__":
    main()
