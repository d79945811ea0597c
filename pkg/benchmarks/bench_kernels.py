"""Compiled vs NumPy kernels: wall time per drift evaluation and agreement.

    python3 benchmarks/bench_kernels.py --sizes 1024 4096 --repeat 3
"""
import argparse
import time

import numpy as np

from vortexlab import _backend
from vortexlab.tree import tree_drift


def direct(pos, circ, backend):
    out = np.zeros_like(pos)
    _backend.get(backend).direct_drift(pos, circ, 0.0, out, 1)
    return out


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        res = fn()
        times.append(time.perf_counter() - t0)
    return min(times), res


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[1024, 4096])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    try:
        _backend.get("cython")
    except ImportError:
        print("compiled extension not built; only the NumPy backend is available")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<8}{'N':>8}{'cython s':>12}{'python s':>12}{'speedup':>10}{'max diff':>12}")
    for n in args.sizes:
        pos = rng.normal(size=(n, 2))
        circ = rng.choice([-1.0, 1.0], size=n)
        cases = {
            "direct": lambda b: direct(pos, circ, b),
            "tree": lambda b: tree_drift(pos, circ, theta=0.5, backend=b),
        }
        for name, fn in cases.items():
            tc, rc = best_of(lambda: fn("cython"), args.repeat)
            tp, rp = best_of(lambda: fn("python"), args.repeat)
            diff = float(np.max(np.abs(rc - rp)))
            print(f"{name:<8}{n:>8}{tc:>12.4f}{tp:>12.4f}{tp / tc:>10.1f}{diff:>12.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
