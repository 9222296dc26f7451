#!/usr/bin/env python3
"""Timing comparison of the compiled and pure-numpy kernel paths.

Runs the three hot kernels (bus injections, power-flow Jacobian, branch
currents) on both bundled cases. The compiled path is what `import
ccopf` picks when numba is importable; setting CCOPF_PURE_NUMPY=1 in the
environment forces the numpy path for the whole package instead.
"""

import os.path
import sys
import timeit

this_path = os.path.dirname(os.path.realpath(__file__))
sys.path.append(os.path.join(this_path, "..", "src"))

from ccopf import build_admittance, build_network, case_dispatch, parse_case
from ccopf import kernels, solve_power_flow

REPEATS = 2000


def bench_case(case_path):
    net = build_network(parse_case(case_path))
    adm = build_admittance(net)
    op = solve_power_flow(net, adm, case_dispatch(net).schedule(net))
    theta, v = op.theta, op.v
    kernels.warmup(adm)

    pairs = [
        ("injections", lambda: kernels.injections(adm, theta, v),
         lambda: kernels.injections_numpy(adm, theta, v)),
        ("jacobian", lambda: kernels.jacobian_full(adm, theta, v),
         lambda: kernels.jacobian_full_numpy(adm, theta, v)),
        ("currents", lambda: kernels.currents(adm, theta, v),
         lambda: kernels.currents_numpy(adm, theta, v)),
    ]
    print(f"{net.name} ({net.n_bus} buses), {REPEATS} calls each:")
    for name, active, fallback in pairs:
        t_active = timeit.timeit(active, number=REPEATS)
        t_numpy = timeit.timeit(fallback, number=REPEATS)
        label = "numba" if kernels.USING_NUMBA else "numpy"
        print(f"  {name:<11} {label}: {t_active:8.3f}s   numpy: {t_numpy:8.3f}s   "
              f"speedup: {t_numpy / t_active:5.2f}x")
    print()


def main():
    backend = "numba" if kernels.USING_NUMBA else "numpy (fallback)"
    print(f"active backend: {backend}\n")
    for case in ("rts96.m", "ieee118.m"):
        bench_case(os.path.join(this_path, "..", "cases", case))


if __name__ == "__main__":
    main()
