"""Compare the two compute backends (vectorized numpy vs jit-compiled loops)
on the convolution kernel and a full model forward pass.

Usage: python3 benchmarks/backend_bench.py [--shape N,C,H,W] [--runs R]
"""

import argparse
import time

import numpy as np

from crowdcount import kernels
from crowdcount.kernels import same_spec
from crowdcount.model import build_model, count_macs, default_config, init_weights


def time_call(fn, runs, warmup=2):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_conv(backend, shape, runs):
    kernels.set_backend(backend)
    n, c, h, w = shape
    rng = np.random.default_rng(0)
    spec = same_spec(c, 16, 9)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    weights = rng.standard_normal((16, c, 9, 9)).astype(np.float32)
    bias = np.zeros(16, np.float32)
    t = time_call(lambda: kernels.conv2d_forward(x, weights, bias, spec), runs)
    macs = n * h * w * 16 * c * 81
    return t, macs


def bench_model(backend, shape, runs):
    kernels.set_backend(backend)
    model = init_weights(build_model(default_config()), 0)
    x = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    t = time_call(lambda: model.forward(x), runs)
    macs = count_macs(model.config, shape[2], shape[3])["total_macs"]
    return t, macs


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--shape", default="1,3,128,160", metavar="N,C,H,W")
    parser.add_argument("--runs", type=int, default=5)
    args = parser.parse_args()
    shape = tuple(int(v) for v in args.shape.split(","))

    prev = kernels.get_backend()
    try:
        print(f"input shape {shape}, best of {args.runs} runs\n")
        print(f"{'kernel':<16}{'backend':<10}{'ms':>10}{'GFLOP/s':>10}")
        for name, fn in (("conv 9x9 c16", bench_conv), ("model forward", bench_model)):
            for backend in ("numpy", "numba"):
                t, macs = fn(backend, shape, args.runs)
                gflops = 2 * macs / t / 1e9
                print(f"{name:<16}{backend:<10}{1000 * t:>10.2f}{gflops:>10.1f}")
    finally:
        kernels.set_backend(prev)


if __name__ == "__main__":
    main()
