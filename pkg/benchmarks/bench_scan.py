"""Compiled vs pure-Python selective scan, forward and forward+backward.

    python benchmarks/bench_scan.py [--repeat 3] [--dtype float32]

Shapes cover the two regimes the network produces: long sequences with a
few channels (SS2D over a 64x64 map) and many short, narrow sequences
(the spectral branch).
"""
import argparse
import time

import torch

from m3sr import kernels

CASES = [
    # name, batch, L, D, N, groups
    ("ss2d-64x64", 4 * 4, 64 * 64, 16, 8, 4),
    ("ss2d-32x32", 4 * 4, 32 * 32, 32, 8, 4),
    ("spectral", 4 * 1024 * 4, 16, 2, 8, 1),
    ("long-seq", 2, 16384, 8, 16, 1),
]


def make_inputs(nb, L, D, N, K, dtype, grad):
    g = torch.Generator().manual_seed(0)
    ts = [
        torch.randn(nb, L, D, generator=g, dtype=dtype),
        torch.randn(nb, L, D, generator=g, dtype=dtype),
        -torch.rand(K, D, N, generator=g, dtype=dtype) * 2,
        torch.randn(nb, L, N, generator=g, dtype=dtype),
        torch.randn(nb, L, N, generator=g, dtype=dtype),
        torch.ones(K, D, dtype=dtype),
    ]
    return [t.requires_grad_(grad) for t in ts]


def run(args, K, backward):
    rev = [k % 2 == 1 for k in range(K)]
    y = kernels.selective_scan(*args, reverse=rev, delta_softplus=True)
    if backward:
        y.sum().backward()


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--cases", nargs="*", help="subset of case names")
    a = p.parse_args()
    dtype = getattr(torch, a.dtype)
    torch.set_num_threads(1)
    backends = kernels.available_backends()
    print(f"backends: {backends}, dtype {a.dtype}")
    print(f"{'case':<12} {'pass':<8} " + " ".join(f"{b + ' ms':>12}" for b in backends)
          + f" {'ns/update':>10} {'speedup':>8}")
    for name, nb, L, D, N, K in CASES:
        if a.cases and name not in a.cases:
            continue
        updates = nb * L * D * N
        for backward in (False, True):
            times = {}
            for b in backends:
                args = make_inputs(nb, L, D, N, K, dtype, backward)
                with kernels.use_backend(b):
                    times[b] = best_of(lambda: run(args, K, backward), a.repeat)
            fast = min(times.values())
            speed = times["python"] / times["cython"] if "cython" in times else 1.0
            print(f"{name:<12} {'fwd+bwd' if backward else 'fwd':<8} "
                  + " ".join(f"{times[b] * 1e3:12.1f}" for b in backends)
                  + f" {fast / updates * 1e9:10.2f} {speed:8.1f}x")


if __name__ == "__main__":
    main()
