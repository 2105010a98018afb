"""Time the numba kernels against the numpy fallback on the two-dipole pair workload.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both paths are called directly, so the env flag does not matter here.  The
first numba call (compilation or cache load) is excluded.
"""

import argparse
import timeit

import numpy as np

from dipex import kernels
from dipex.forward import ETA0, Dipole, Environment, forward_fields
from dipex.scan import make_cylinder, uniform_azimuths
from dipex.solver import LeastSquares

F = 781.25e6


def setup(n_dipoles):
    env = Environment(F, ground=True)
    h = 1.0 + 0.25 * np.arange(13)
    s1 = make_cylinder(0.5, h, uniform_azimuths(36))
    s2 = make_cylinder(1.0, h, uniform_azimuths(36))
    rng = np.random.default_rng(0)
    kinds = rng.integers(6, size=n_dipoles).astype(np.int64)
    pos = np.column_stack((rng.uniform(-0.4, 0.4, n_dipoles), rng.uniform(-0.4, 0.4, n_dipoles),
                           rng.uniform(1.1, 1.9, n_dipoles)))
    src = [Dipole(int(k), p, complex(*rng.normal(size=2))) for k, p in zip(kinds, pos)]
    m1 = forward_fields(src, s1, env).magnitudes()
    m2 = forward_fields(src, s2, env).magnitudes()
    return env, s1, s2, kinds, pos, m1, m2


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"default backend: {kernels.backend()}")
    print(f"{'kernel':<22}{'N':>3}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}")
    for n in (1, 2, 5):
        env, s1, s2, kinds, pos, m1, m2 = setup(n)
        targs = (kinds, pos, s1.positions, s1.tangent_u, s1.tangent_v, env.wavenumber, ETA0, True)
        T1 = kernels.transfer_numpy(*targs)[0]
        T2 = kernels.transfer_numpy(kinds, pos, s2.positions, s2.tangent_u, s2.tangent_v, env.wavenumber, ETA0, True)[0]
        P1, P2 = LeastSquares(T1).operator, LeastSquares(T2).operator
        d0 = P2 @ m2.astype(complex)
        hist = np.empty((501, 3))
        sargs = (T1, P1, m1, T2, P2, m2, d0, 1e-4, 500, hist)
        cases = [("transfer (468 pts)", kernels.transfer_numpy, kernels.transfer_numba, targs),
                 ("back-and-forth sweep", kernels.sweep_two_numpy, kernels.sweep_two_numba, sargs)]
        for name, f_np, f_nb, a in cases:
            f_nb(*a)
            t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
            t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<22}{n:>3}{t_np:>11.3f}{t_nb:>11.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
