"""Compiled vs pure-Python kernels: kd-tree queries and linear assignment.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from surfrecon import _kernels_py

try:
    from surfrecon import _kernels as _compiled
except ImportError:
    _compiled = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    for n in (1024, 4096):
        pts, q = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        yield f"kdtree build+query n={n}", lambda m, p=pts, q=q: m.KDTree(p).query(q)
        yield f"kdtree 8-nn n={n}", lambda m, p=pts, q=q: m.KDTree(p).query_knn(q, 8)
    for n in (64, 256):
        c = rng.random((n, n))
        yield f"assignment n={n}", lambda m, c=c: m.linear_assignment(c)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'case':28s} {'python [s]':>11s} {'compiled [s]':>13s} {'speedup':>8s}")
    for name, fn in cases(rng):
        tp = best_of(lambda: fn(_kernels_py), args.repeat)
        if _compiled is None:
            print(f"{name:28s} {tp:11.4f} {'n/a':>13s} {'n/a':>8s}")
            continue
        tc = best_of(lambda: fn(_compiled), args.repeat)
        print(f"{name:28s} {tp:11.4f} {tc:13.4f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
