#!/usr/bin/env python3
"""Compare the compiled kernel core against the numpy fallback.

Runs per-kernel microbenchmarks at training-time shapes, then times a
short end-to-end training run under each backend. Invoke from the repo
root:

    python3 benchmarks/bench_backends.py [--iters 40]
"""

import argparse
import time

import numpy as np

from protoad import backend
from protoad.recon import Variant
from protoad.synth import DatasetSpec, generate
from protoad.train import TrainConfig, train

# (rows, cols) matching a batch-8 training step at the default model size
LN_SHAPE = (512, 32)
SM_SHAPE = (2048, 64)
GELU_N = 512 * 128
ADAM_N = 64 * 128


def timeit(fn, repeats=200):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e6  # microseconds


def kernel_cases(dtype):
    r = np.random.default_rng(0)
    x_ln = r.normal(size=LN_SHAPE).astype(dtype)
    gamma = np.ones(LN_SHAPE[1], dtype)
    beta = np.zeros(LN_SHAPE[1], dtype)
    g_ln = r.normal(size=LN_SHAPE).astype(dtype)
    x_sm = r.normal(size=SM_SHAPE).astype(dtype)
    g_sm = r.normal(size=SM_SHAPE).astype(dtype)
    x_ge = r.normal(size=GELU_N).astype(dtype)
    g_ge = r.normal(size=GELU_N).astype(dtype)
    p = r.normal(size=ADAM_N).astype(dtype)
    gr = r.normal(size=ADAM_N).astype(dtype)
    m = np.zeros(ADAM_N, dtype)
    v = np.zeros(ADAM_N, dtype)

    def ln_fwd(impl):
        return lambda: impl.layernorm_forward(x_ln, gamma, beta, 1e-5)

    def ln_bwd(impl):
        _, xhat, rstd = impl.layernorm_forward(x_ln, gamma, beta, 1e-5)
        return lambda: impl.layernorm_backward(g_ln, xhat, rstd, gamma)

    def sm_fwd(impl):
        return lambda: impl.softmax_forward(x_sm)

    def sm_bwd(impl):
        y = impl.softmax_forward(x_sm)
        return lambda: impl.softmax_backward(g_sm, y)

    def ge_fwd(impl):
        return lambda: impl.gelu_forward(x_ge)

    def ge_bwd(impl):
        _, cdf = impl.gelu_forward(x_ge)
        return lambda: impl.gelu_backward(g_ge, x_ge, cdf)

    def adam(impl):
        return lambda: impl.adamw_update(p, gr, m, v, 3, 1e-4, 0.9, 0.999, 1e-8, 1e-4, 1.0)

    return [
        (f"layernorm fwd {LN_SHAPE}", ln_fwd),
        (f"layernorm bwd {LN_SHAPE}", ln_bwd),
        (f"softmax fwd {SM_SHAPE}", sm_fwd),
        (f"softmax bwd {SM_SHAPE}", sm_bwd),
        (f"gelu fwd n={GELU_N}", ge_fwd),
        (f"gelu bwd n={GELU_N}", ge_bwd),
        (f"adamw update n={ADAM_N}", adam),
    ]


def bench_kernels():
    impls = {name: backend._impls[name] for name in backend.available_backends()}
    for dtype in (np.float32, np.float64):
        print(f"\nkernel microbenchmarks, {np.dtype(dtype).name} (µs/call)")
        header = f"{'kernel':28s}" + "".join(f"{n:>12s}" for n in impls)
        if len(impls) > 1:
            header += f"{'speedup':>9s}"
        print(header)
        for label, case in kernel_cases(dtype):
            times = {n: timeit(case(impl)) for n, impl in impls.items()}
            row = f"{label:28s}" + "".join(f"{times[n]:12.1f}" for n in impls)
            if "compiled" in times and "reference" in times:
                row += f"{times['reference'] / times['compiled']:8.1f}x"
            print(row)


def bench_training(iters):
    ds = generate(DatasetSpec(seed=1, train_count=64, test_normal=4, test_anomalous=4))
    print(f"\nend-to-end training, {iters} iterations (default model, batch 8)")
    prev = backend.active_backend()
    try:
        for name in backend.available_backends():
            backend.set_backend(name)
            cfg = TrainConfig(mode=Variant.M2PLUS, iterations=iters, batch_size=8, seed=1)
            t0 = time.perf_counter()
            train(cfg, ds)
            dt = time.perf_counter() - t0
            print(f"{name:12s}: {dt:6.2f} s total, {dt / iters * 1000:6.1f} ms/step")
    finally:
        backend.set_backend(prev)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iters", type=int, default=40, help="training steps per backend")
    args = parser.parse_args()
    print(f"available backends: {', '.join(backend.available_backends())}")
    print(f"active by default:  {backend.active_backend()}")
    bench_kernels()
    bench_training(args.iters)


if __name__ == "__main__":
    main()
