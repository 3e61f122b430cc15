"""Time the numba and numpy kernel paths on training-sized batches.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Kernel timings use a batch shaped like one epoch of preference data on the
default task; the end-to-end row times one drift-experiment seed with each
backend forced through ``kernels.DEFAULT_BACKEND``.
"""

from __future__ import annotations

import argparse
import json
import time
import timeit

import numpy as np

from bpclab import kernels
from bpclab.runner.config import RunConfig
from bpclab.runner.experiments import train_branches


def kernel_cases(seed=0, P=200, V=7, N=800, T=4):
    gen = np.random.default_rng(seed)
    logits = gen.normal(size=(P * (V + 1), V))
    states = gen.integers(0, logits.shape[0], size=(N, T))
    tokens = gen.integers(0, V, size=(N, T))
    flip = gen.random(N) < 0.5
    w = np.full(N, 1.0 / N)

    def run(fn, **kw):
        def go(backend):
            g = np.zeros_like(logits)
            fn(logits, states, tokens, seq_weight=w, grad=g, backend=backend, **kw)

        return go

    return {
        "seq_logprob": run(kernels.seq_logprob),
        "seq_calibration": run(kernels.seq_calibration, flip=flip),
        "seq_cross_entropy": run(kernels.seq_cross_entropy, eps=0.1),
    }


def time_drift_seed(backend: str) -> float:
    old = kernels.DEFAULT_BACKEND
    kernels.DEFAULT_BACKEND = backend
    try:
        t0 = time.perf_counter()
        train_branches(RunConfig(), 0)
        return time.perf_counter() - t0
    finally:
        kernels.DEFAULT_BACKEND = old


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    backends = [b for b in ("numpy", "numba") if b in kernels.IMPLEMENTATIONS]
    rows = []
    for name, go in kernel_cases().items():
        for b in backends:
            go(b)  # compile / warm up
            best = min(timeit.repeat(lambda: go(b), number=1, repeat=args.repeat))
            rows.append({"case": name, "backend": b, "seconds": best})
    for b in backends:
        time_drift_seed(b)
        rows.append({"case": "drift_one_seed", "backend": b, "seconds": time_drift_seed(b)})
    print(f"{'case':<20}{'backend':<10}{'ms':>10}")
    for r in rows:
        print(f"{r['case']:<20}{r['backend']:<10}{1e3 * r['seconds']:>10.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
