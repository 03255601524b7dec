"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--d 1024] [--rows 200]

Both backends are checked for agreement before anything is timed; the numba
numbers exclude compilation (one warm-up call per kernel).
"""

import argparse
import time

import numpy as np

from tcmcap import activations as acts
from tcmcap import free_energy as fe
from tcmcap._accel import HAVE_NUMBA, use_numba
from tcmcap._kernels import nested_log_mean, z1_batch
from tcmcap.free_energy import LiftParams
from tcmcap.overlap import curve_for, effective_coeffs
from tcmcap.quadrature import gauss_hermite


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def nested_case(r, order):
    # a level-r point shaped like the tanh solutions
    p = (0.966, 0.769, 0.5)[: r - 1]
    q = (0.848, 0.568, 0.3)[: r - 1]
    c = (7.2, 2.8, 1.5)[: r - 1]
    params = LiftParams(r, p, q, c, 0.18, 1.37)
    coeffs = np.array(effective_coeffs(curve_for("tanh"), (1.0,) + p + (0.0,)).bbar)
    kappa = np.array([c[k] / c[k - 1] for k in range(1, r - 1)])
    grid = gauss_hermite(order)
    B = c[0] / (4.0 * params.gamma_sq)
    return lambda: nested_log_mean(coeffs, B, kappa, grid.nodes, grid.weights, order)


def run(label, fn, repeat):
    use_numba(True)
    a = fn()
    t_nb = best_of(fn, repeat)
    use_numba(False)
    b = fn()
    t_np = best_of(fn, repeat)
    use_numba(True)
    return label, t_nb, t_np, a, b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--d", type=int, default=1024)
    ap.add_argument("--rows", type=int, default=200)
    ap.add_argument("--order", type=int, default=fe.NESTED_ORDER)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    cases = [run(f"nested_log_mean r={r}", nested_case(r, args.order), args.repeat) for r in (2, 3)]
    G = np.random.default_rng(0).standard_normal((args.rows, args.d))
    for name in acts.BUILTIN:
        act = acts.get(name)
        cases.append(run(f"z1_batch {name} d={args.d} x{args.rows}", lambda: z1_batch(act, G)[0], args.repeat))

    print(f"{'kernel':<34}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>9}  max |diff|")
    for label, t_nb, t_np, a, b in cases:
        diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
        print(f"{label:<34}{t_nb:>12.4g}{t_np:>12.4g}{t_np / t_nb:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
