"""Compare the compiled and pure-Python KD-tree query kernels.

    python3 benchmarks/bench_nn.py [--sizes 1000,10000,50000] [--repeat 5] [--csv out.csv]

Each row times building one tree over ``n`` points and querying ``n`` points
against it; the best of ``--repeat`` runs is reported, plus a brute-force
scan for the smaller sizes. Both kernels are also checked to return the
same indices.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from resflow import nn_index


def _best(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run(sizes, repeat=5, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        P = rng.uniform(-5, 5, size=(n, 3))
        Q = P + rng.normal(scale=0.05, size=P.shape)
        row = {"n": n}
        results = {}
        for backend in sorted(nn_index.BACKENDS):
            idx = nn_index.NeighborIndex(P, backend=backend)
            row[f"{backend}_s"], results[backend] = _best(lambda: idx.query(Q)[0], repeat)
        if len(results) > 1:
            a, b = results.values()
            row["agree"] = bool(np.array_equal(a, b))
        if n <= 5000:
            row["brute_s"], _ = _best(lambda: nn_index.brute_force(P, Q)[0], 1)
        if "compiled_s" in row:
            row["speedup"] = row["python_s"] / row["compiled_s"]
        rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1000,10000,50000")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    if "compiled" not in nn_index.BACKENDS:
        print("compiled kernel not built; timing the Python fallback only", file=sys.stderr)
    rows = run(sizes, args.repeat)
    cols = ["n", "compiled_s", "python_s", "brute_s", "speedup", "agree"]
    cols = [c for c in cols if any(c in r for r in rows)]
    print("  ".join(f"{c:>12}" for c in cols))
    for r in rows:
        print("  ".join(f"{r.get(c, ''):>12.4g}" if isinstance(r.get(c), float) else f"{str(r.get(c, '')):>12}"
                        for c in cols))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
