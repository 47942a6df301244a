"""Compiled vs numpy-fallback kernels: per-call latency and one training step.

    python3 benchmarks/bench_kernels.py [--repeats N]

Both backends count the same MACs; the table reports wall time only, plus
the largest output difference between the two backends.
"""

import argparse
import time

import numpy as np

from agfusion import backend
from agfusion.degradation_sim import AblationConfig, run_ablation

MATMUL_SHAPES = [(256, 16, 16), (256, 16, 64), (256, 64, 16), (16, 256, 16)]
ATTN_SHAPES = [(64, 16, 4), (16, 64, 4), (1, 256, 4)]      # groups, tokens, head dim


def best_of(fn, repeats, inner):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def kernel_rows(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for n, m, p in MATMUL_SHAPES:
        a, b = rng.normal(size=(n, m)), rng.normal(size=(m, p))
        t, outs = {}, {}
        for name in backend.available():
            k = backend.KERNELS[name]
            outs[name] = k.matmul(a, b)[0]
            t[name] = best_of(lambda: k.matmul(a, b), repeats, 200)
        rows.append((f"matmul {n}x{m} @ {m}x{p}", t, outs))
    for g, tok, d in ATTN_SHAPES:
        q, kk, v = (rng.normal(size=(g, tok, d)) for _ in range(3))
        dout = rng.normal(size=(g, tok, d))
        t, outs = {}, {}
        for name in backend.available():
            k = backend.KERNELS[name]
            fwd = k.attention_forward(q, kk, v, 0.5)
            outs[name] = fwd[0]
            t[name] = best_of(lambda: k.attention_forward(q, kk, v, 0.5), repeats, 50)
            t[name] += best_of(lambda: k.attention_backward(dout, q, kk, v, fwd[1], 0.5), repeats, 50)
        rows.append((f"attention fwd+bwd {g}x{tok}x{d}", t, outs))
    return rows


def step_row(repeats):
    cfg = AblationConfig(seed=0, steps=20)
    t = {}
    for name in backend.available():
        with backend.use(name):
            run_ablation(cfg, "adaptive", 2)                       # warm-up
            t[name] = best_of(lambda: run_ablation(cfg, "adaptive", 20), repeats, 1) / 20
    return "training step (16x16x16, adaptive)", t, {}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    names = backend.available()
    rows = kernel_rows(args.repeats) + [step_row(args.repeats)]
    head = f"{'case':<36s}" + "".join(f"{n + ' us':>14s}" for n in names)
    if len(names) > 1:
        head += f"{'speedup':>10s}{'max |diff|':>12s}"
    print(head)
    for label, t, outs in rows:
        line = f"{label:<36s}" + "".join(f"{1e6 * t[n]:>14.1f}" for n in names)
        if len(names) > 1:
            diff = max((float(np.abs(outs[n] - outs["python"]).max()) for n in names), default=0.0) if outs else 0.0
            line += f"{t['python'] / t['cython']:>10.2f}" + (f"{diff:>12.1e}" if outs else f"{'':>12s}")
        print(line)
    if len(names) == 1:
        print("compiled kernels unavailable; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
