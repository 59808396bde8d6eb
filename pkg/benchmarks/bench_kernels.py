"""Compare the compiled and numpy training kernels.

    python benchmarks/bench_kernels.py [--samples 1000] [--epochs 100] [--repeats 5]

Times plain SGD and DP-SGD over one pool-model's worth of training and
checks that both backends land on the same parameters.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from unlearnaudit import backend
from unlearnaudit.data import generate_synthetic, random_half_split
from unlearnaudit.model import batch_schedule, init_model, weight_mask


def _best_of(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)

    ds = generate_synthetic(args.samples, 2, 8, 1.0, seed=0)
    arch = (8, args.hidden, 2)
    rows = np.flatnonzero(random_half_split(len(ds), 0))
    idx, offsets = batch_schedule(rows, args.epochs, args.batch_size, np.random.default_rng(0))
    start = init_model(arch, 0).params
    decay = 1e-4 * weight_mask(arch)
    ones = np.ones_like(start)
    steps = offsets.size - 1
    noise = np.random.default_rng(1).standard_normal((steps, start.size))

    names = ["python"] + (["c"] if backend.compiled_available() else [])
    results = {}
    for name in names:
        k = backend.get(name)

        def sgd():
            p = start.copy()
            k.sgd_steps(p, arch, ds.features, ds.labels, idx, offsets, 0.1, decay, ones, 1.0)
            return p

        def dp():
            p = start.copy()
            k.dp_sgd_steps(p, arch, ds.features, ds.labels, idx, offsets, 0.1, decay, 1.0, noise)
            return p

        results[name] = (_best_of(sgd, args.repeats), _best_of(dp, args.repeats))

    print(f"{len(rows)} members x {args.epochs} epochs, arch {arch}, {steps} steps")
    print(f"{'backend':8s} {'sgd s':>10s} {'dp-sgd s':>10s}")
    for name, ((t_sgd, _), (t_dp, _)) in results.items():
        print(f"{name:8s} {t_sgd:10.4f} {t_dp:10.4f}")
    if "c" in results:
        (ps, pp), (cs, cp) = results["python"], results["c"]
        print(f"speed-up: sgd {ps[0] / cs[0]:.1f}x, dp-sgd {pp[0] / cp[0]:.1f}x")
        print(f"max |param diff|: sgd {np.max(np.abs(ps[1] - cs[1])):.2e}, dp-sgd {np.max(np.abs(pp[1] - cp[1])):.2e}")
    else:
        print("compiled kernels not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
