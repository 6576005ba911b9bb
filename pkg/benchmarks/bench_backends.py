"""Compare the compiled core with the numpy fallback.

Usage::

    python3 benchmarks/bench_backends.py [--N 20000] [--repeats 3]

Times whole simulations in both interaction regimes and a mollified-density
evaluation, checks that both backends produce the same event log, and prints
one row per workload with the speed-up of the compiled core.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from spatial_sir import _backend
from spatial_sir.engine import simulate
from spatial_sir.kernels import GaussianT, Local, MeanField
from spatial_sir.measures import empirical_measure, mollified_density
from spatial_sir.model import (
    CompartmentProfile,
    InitialDistribution,
    ModelParams,
    Uniform,
    sample_initial_population,
)


def _best_of(fn, repeats):
    best, result = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=20_000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    backends = _backend.available_backends()
    if "cython" not in backends:
        print("compiled core not built; only the python backend is available")
    dist = InitialDistribution(Uniform(), CompartmentProfile(infected_base=0.02))
    pop = sample_initial_population(dist, args.N, args.seed)
    params = ModelParams(1.0, 4.0, 2.0)
    # the Gaussian kernel carries about a fifth of the mass of T = 1, so a larger q keeps the epidemic growing
    mf_params = ModelParams(1.0, 20.0, 2.0)

    workloads = {
        "simulate meanfield": lambda b: simulate(pop, mf_params, MeanField(GaussianT(0.2)), [2.0], args.seed, backend=b),
        "simulate local": lambda b: simulate(pop, params, Local(0.25), [2.0], args.seed, backend=b),
        "mollified density 64x64": lambda b: mollified_density(empirical_measure(pop), Local(0.25), 64, backend=b),
    }
    print(f"N = {args.N}, best of {args.repeats}")
    print(f"{'workload':<26}" + "".join(f"{b:>12}" for b in backends) + f"{'speed-up':>10}  {'events':>8}")
    for name, fn in workloads.items():
        times, results = {}, {}
        for b in backends:
            times[b], results[b] = _best_of(lambda: fn(b), args.repeats)
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        events = getattr(results["python"], "n_events", "")
        if "cython" in results and hasattr(results["python"], "indices"):
            if not np.array_equal(results["python"].indices, results["cython"].indices):
                raise SystemExit(f"{name}: event logs differ between backends")
        print(f"{name:<26}" + "".join(f"{times[b]:>11.3f}s" for b in backends) + f"{speedup:>9.1f}x  {events!s:>8}")


if __name__ == "__main__":
    main()
