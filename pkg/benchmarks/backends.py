"""Time the numba kernels against the numpy fallback.

Usage: python3 benchmarks/backends.py [--n 256,1024,4096] [--batch 1,16] [--reps 7]

Each backend first checks agreement with the other on the same inputs, then
reports the median wall time of ``eco_aggregate`` and ``explicit_aggregate``.
"""
import argparse

import numpy as np
from threadpoolctl import threadpool_limits

from ragl import kernels
from ragl.bench import median_time, random_gated


def parse_ints(text):
    return [int(v) for v in text.split(",") if v]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=parse_ints, default=[256, 1024, 4096])
    ap.add_argument("--batch", type=parse_ints, default=[1, 16])
    ap.add_argument("--d-node", type=int, default=32)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--explicit-max", type=int, default=2048)
    args = ap.parse_args()

    if not kernels.numba_available():
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<9} {'N':>6} {'B':>4} {'numpy_s':>11} {'numba_s':>11} {'speedup':>8} {'max_dev':>9}")
    with threadpool_limits(limits=args.threads):
        for n in args.n:
            e = random_gated(n, args.d_node, rng)
            for b in args.batch:
                h = rng.standard_normal((b, n, args.d) if b > 1 else (n, args.d))
                kernels_to_run = [("eco", kernels.eco_aggregate)]
                if n <= args.explicit_max:
                    kernels_to_run.append(("explicit", kernels.explicit_aggregate))
                for label, fn in kernels_to_run:
                    times, outs = {}, {}
                    for name in ("numpy", "numba"):
                        with kernels.use_backend(name):
                            outs[name] = fn(e, h)  # also triggers compilation
                            times[name] = median_time(lambda: fn(e, h), args.reps, warmup=1)
                    dev = float(np.max(np.abs(outs["numpy"] - outs["numba"])))
                    print(f"{label:<9} {n:>6} {b:>4} {times['numpy']:>11.3e} {times['numba']:>11.3e} "
                          f"{times['numpy'] / times['numba']:>8.2f} {dev:>9.1e}")


if __name__ == "__main__":
    main()
