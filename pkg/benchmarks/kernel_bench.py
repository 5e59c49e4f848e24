#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs each kernel at a few representative shapes plus one end-to-end
forward/backward pass, and prints the per-call times and speedups.
The numba path is warmed up first so JIT compilation is not timed.

    python benchmarks/kernel_bench.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from pockformer import kernels


def bench(fn, args, repeats):
    fn(*args)  # warmup (and JIT compile on the numba path)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def make_cases(rng):
    cases = []
    for n, d in ((512, 128), (4096, 256)):
        x = rng.normal(size=(n, d))
        g, b = rng.normal(size=d), rng.normal(size=d)
        dy = rng.normal(size=(n, d))
        _, mean, rstd = kernels.layer_norm_fwd(x, g, b)
        cases.append((f"layer_norm_fwd {n}x{d}", kernels.layer_norm_fwd, (x, g, b)))
        cases.append((f"layer_norm_bwd {n}x{d}", kernels.layer_norm_bwd,
                      (dy, x, g, mean, rstd)))
    for shape in ((512, 512), (2048, 1024)):
        x = rng.normal(size=shape)
        cases.append((f"gelu_fwd {shape[0]}x{shape[1]}", kernels.gelu_fwd, (x,)))
        cases.append((f"gelu_bwd {shape[0]}x{shape[1]}", kernels.gelu_bwd,
                      (rng.normal(size=shape), x)))
    for r, t in ((8, 128), (16, 256)):
        scores = rng.normal(size=(r, t, t)) * 3
        probs = kernels.causal_softmax(scores)
        cases.append((f"causal_softmax {r}x{t}x{t}", kernels.causal_softmax, (scores,)))
        cases.append((f"causal_softmax_bwd {r}x{t}x{t}", kernels.causal_softmax_bwd,
                      (rng.normal(size=scores.shape), probs)))
    return cases


def bench_adamw(rng, repeats, backend):
    kernels.set_backend(backend)
    p = rng.normal(size=(1024, 768))
    g = rng.normal(size=p.shape)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    kernels.adamw_update(p, g, m, v, 1, 1e-3, 0.9, 0.999, 1e-8, 0.1)
    times = []
    for t in range(2, repeats + 2):
        t0 = time.perf_counter()
        kernels.adamw_update(p, g, m, v, t, 1e-3, 0.9, 0.999, 1e-8, 0.1)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_forward_backward(repeats, backend):
    from pockformer.model import ModelConfig, backward, forward, init_model

    kernels.set_backend(backend)
    rng = np.random.default_rng(0)
    cfg = ModelConfig(n_layers=4, n_heads=4, d_model=128, max_len=512, vocab_size=48)
    m = init_model(cfg, 0)
    tokens = rng.integers(0, 48, size=(8, 256))
    numbers = rng.normal(size=(8, 256))

    def run():
        out, cache = forward(m, tokens, numbers, want_cache=True)
        backward(m, cache, np.ones_like(out.logits) / out.logits.size,
                 np.ones_like(out.numbers) / out.numbers.size)

    run()
    times = []
    for _ in range(max(3, repeats // 5)):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba is not importable; only the numpy backend is available")
        return

    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    rows = make_cases(rng)
    for name, fn, fargs in rows:
        kernels.set_backend("numpy")
        t_np = bench(fn, fargs, args.repeats)
        kernels.set_backend("numba")
        t_nb = bench(fn, fargs, args.repeats)
        print(f"{name:38s} {t_np * 1e3:9.3f}ms {t_nb * 1e3:9.3f}ms {t_np / t_nb:7.2f}x")

    t_np = bench_adamw(rng, args.repeats, "numpy")
    t_nb = bench_adamw(rng, args.repeats, "numba")
    print(f"{'adamw_update 1024x768':38s} {t_np * 1e3:9.3f}ms {t_nb * 1e3:9.3f}ms "
          f"{t_np / t_nb:7.2f}x")

    t_np = bench_forward_backward(args.repeats, "numpy")
    t_nb = bench_forward_backward(args.repeats, "numba")
    print(f"{'forward+backward 4L/128d/8x256':38s} {t_np * 1e3:9.3f}ms "
          f"{t_nb * 1e3:9.3f}ms {t_np / t_nb:7.2f}x")
    kernels.set_backend("auto")


if __name__ == "__main__":
    main()
