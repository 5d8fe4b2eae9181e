"""Timing comparison of the numba kernels against their numpy twins.

Runs each hot kernel (bus injections, injection Jacobians, branch flows,
branch flow partials) on random operating states of both benchmark grids
and reports per-call medians plus the speedup.  The numba functions are
reached directly through their nb_* names so the comparison works no
matter which implementation the package selected at import.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--calls N]
"""

import argparse
import os
import statistics
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from opflearn import _kernels as kern
from opflearn import caseio, grid as grid_mod

DATA = os.path.join(os.path.dirname(__file__), "..", "data")

HAS_NUMBA = kern.nb_injections is not None
if not HAS_NUMBA:
    print("numba kernels unavailable (not installed or OPFLEARN_PURE_NUMPY set)")
    print("timing the numpy path only")


def random_state(grid, seed, spread=0.1):
    rng = np.random.default_rng(seed)
    vm = 1.0 + spread * (rng.random(grid.n_bus) - 0.5)
    va = spread * (rng.random(grid.n_bus) - 0.5)
    return vm, va


def flow_args(grid, vm, va):
    return (grid.fbus, grid.tbus,
            grid.yff.real, grid.yff.imag, grid.yft.real, grid.yft.imag,
            grid.ytf.real, grid.ytf.imag, grid.ytt.real, grid.ytt.imag,
            vm, va)


def time_fn(fn, args_list, repeats, calls):
    """Median seconds per call over `repeats` timed loops of `calls` calls."""
    fn(*args_list[0])  # warmup (triggers JIT compile on the numba path)
    per_call = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for args in args_list:
            fn(*args)
        per_call.append((time.perf_counter() - t0) / calls)
    return statistics.median(per_call)


def bench_case(name, repeats, calls):
    case = caseio.parse_matpower_file(os.path.join(DATA, name))
    grid = grid_mod.build_grid(case)
    states = [random_state(grid, s) for s in range(calls)]
    inj_args = [(grid.gbus, grid.bbus, vm, va) for vm, va in states]
    flw_args = [flow_args(grid, vm, va) for vm, va in states]

    pairs = [
        ("injections", kern.np_injections, kern.nb_injections, inj_args),
        ("injection_jacobians", kern.np_injection_jacobians,
         kern.nb_injection_jacobians, inj_args),
        ("branch_flows", kern.np_branch_flows, kern.nb_branch_flows, flw_args),
        ("branch_flow_partials", kern.np_branch_flow_partials,
         kern.nb_branch_flow_partials, flw_args),
    ]

    print(f"\n{name}: {grid.n_bus} buses, {grid.fbus.size} branches "
          f"({calls} calls x {repeats} repeats, median per call)")
    print(f"  {'kernel':<22} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for label, np_fn, nb_fn, args_list in pairs:
        t_np = time_fn(np_fn, args_list, repeats, calls)
        if HAS_NUMBA:
            t_nb = time_fn(nb_fn, args_list, repeats, calls)
            print(f"  {label:<22} {t_np * 1e6:>10.1f}us {t_nb * 1e6:>10.1f}us "
                  f"{t_np / t_nb:>8.2f}x")
        else:
            print(f"  {label:<22} {t_np * 1e6:>10.1f}us {'-':>12} {'-':>9}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--calls", type=int, default=200)
    args = ap.parse_args(argv)

    print(f"numpy {np.__version__}, numba kernels: "
          f"{'active' if HAS_NUMBA else 'unavailable'}")
    for name in ("case57.m", "case118.m"):
        bench_case(name, args.repeats, args.calls)


if __name__ == "__main__":
    main()
