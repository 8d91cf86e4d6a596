"""Compare the numba kernels with their numpy twins on realistic input sizes.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel is run once per backend before timing so JIT compilation is
excluded. Outputs are checked for equality before anything is timed.
"""

import argparse
import json
import time

import numpy as np

from simctr._accel import NUMBA_KERNELS, NUMPY_KERNELS


def make_cases(rng):
    cats = rng.integers(0, 100, 50_000)
    scores = rng.standard_normal(50_000)
    idx = rng.integers(0, 10_000, 200_000)
    vals = rng.standard_normal((200_000, 4))
    starts = np.sort(rng.integers(0, 49_000, 5_000))
    ends = starts + rng.integers(0, 1_000, 5_000)
    targets = rng.integers(0, 100, 5_000)
    L, N, P = 32, 10_000, 79
    codes = rng.integers(0, 4096, (L, N))
    perm = np.argsort(codes, axis=1, kind="stable")
    sorted_codes = np.take_along_axis(codes, perm, axis=1)
    probes = rng.integers(0, 4096, (L, P))
    weights = rng.random(P)
    return {
        "last_k_matching": lambda f: f(cats, np.int64(7), 200),
        "topk_recent": lambda f: f(scores, 200),
        "scatter_add_rows": lambda f: _scatter(f, idx, vals),
        "segment_match_count": lambda f: f(cats, starts, ends, targets),
        "alsh_votes": lambda f: f(sorted_codes, perm, probes, weights, N),
    }


def _scatter(f, idx, vals):
    out = np.zeros((10_000, 4))
    f(out, idx, vals)
    return out


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the table as JSON")
    args = ap.parse_args()

    cases = make_cases(np.random.default_rng(args.seed))
    rows = []
    for name, call in cases.items():
        a = call(NUMPY_KERNELS[name])
        b = call(NUMBA_KERNELS[name])
        if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        t_np = best_of(lambda: call(NUMPY_KERNELS[name]), args.repeat)
        t_nb = best_of(lambda: call(NUMBA_KERNELS[name]), args.repeat)
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})

    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<22}{r['numpy_ms']:>12.3f}{r['numba_ms']:>12.3f}{r['speedup']:>10.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
