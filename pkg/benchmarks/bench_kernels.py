"""Time the numba kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--chains 128] [--size 28] [--sweeps 20]
"""

import argparse
import time

import numpy as np

from dequantmc import kernels


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--chains", type=int, default=128)
    parser.add_argument("--size", type=int, default=28, help="lattice side length")
    parser.add_argument("--sweeps", type=int, default=20)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    n, side, S = args.chains, args.size, args.sweeps
    d = side * side
    nbr = kernels.lattice_neighbours(side, side)
    field = rng.choice([-1.0, 1.0], d)
    spins0 = np.zeros((n, d + 1))
    spins0[:, :d] = rng.choice([-1.0, 1.0], (n, d))
    orders = np.argsort(rng.random((n, S, d)), axis=2)
    unif = rng.random((n, S, d))
    coords = rng.integers(0, d, (n, S * d))
    levels = rng.integers(0, 2, (n, S * d))
    unif_mh = rng.random((n, S * d))
    rho = np.exp(-np.arange(4096) / 50.0)[None].repeat(64, axis=0)

    cases = {
        "gibbs": (lambda: kernels.gibbs_numpy(spins0.copy(), nbr, field, 1.0, orders, unif),
                  lambda: kernels.gibbs_loops(spins0.copy(), nbr, field, 1.0, orders, unif)),
        "discrete-mh": (
            lambda: kernels.mh_numpy(spins0.copy(), nbr, field, 1.0, coords, levels, unif_mh,
                                     np.zeros(n, dtype=np.int64)),
            lambda: kernels.mh_loops(spins0.copy(), nbr, field, 1.0, coords, levels, unif_mh,
                                     np.zeros(n, dtype=np.int64))),
        "geyer": (lambda: kernels.geyer_numpy(rho), lambda: kernels.geyer_loops(rho)),
    }
    label = "numba" if kernels.USE_NUMBA else "loops (numba disabled)"
    print(f"{n} chains, {side}x{side} lattice, {S} sweeps; best of {args.repeats}")
    print(f"{'kernel':<12} {'numpy s':>10} {label + ' s':>24} {'speed-up':>9}")
    for name, (vec, loops) in cases.items():
        loops()  # compile outside the timed region
        t_vec = best_of(vec, args.repeats)
        t_loop = best_of(loops, args.repeats)
        print(f"{name:<12} {t_vec:>10.4f} {t_loop:>24.4f} {t_vec / t_loop:>8.1f}x")


if __name__ == "__main__":
    main()
