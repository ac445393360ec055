"""Time the compiled geometry kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--points 400] [--dim 256] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from trajgeom import kernels


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=400)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    states = np.cumsum(np.random.default_rng(args.seed).standard_normal((args.points, args.dim)), axis=0)
    backends = kernels.available_backends()
    cases = {
        "path_stats": lambda b: kernels.path_stats(states, backend=b),
        "menger_profile": lambda b: kernels.menger_profile(states, 1e-12, backend=b),
        "two_nn": lambda b: kernels.two_nn(states, backend=b),
    }
    print(f"points={args.points} dim={args.dim} backends={','.join(backends)}")
    print(f"{'kernel':<16}" + "".join(f"{b + ' ms':>14}" for b in backends) + ("  speedup" if len(backends) > 1 else ""))
    for name, fn in cases.items():
        times = {b: bench(lambda: fn(b), args.repeat) for b in backends}
        line = f"{name:<16}" + "".join(f"{1e3 * times[b]:>14.3f}" for b in backends)
        if "cython" in times:
            line += f"  {times['python'] / times['cython']:>6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
