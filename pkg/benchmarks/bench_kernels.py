"""Compare the numba and numpy backends of the attack loop.

Usage: python3 benchmarks/bench_kernels.py [--trials N] [--horizon T] [--repeat R]
"""

import argparse
import time

import numpy as np

from zofdi import AdversaryObjective, AttackConfig, Reference, get_scenario
from zofdi.kernels import HAVE_NUMBA
from zofdi.zofo import run_batch


def bench(backend, scenario, obj, cfg, trials, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = run_batch(scenario, obj, cfg, None, range(trials), 0, backend=backend, store_states=False)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--horizon", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    cases = [
        ("paper-linear", Reference.static(-1.5), dict(probe="trig", hold=1)),
        ("stable-linear", Reference.ramp(1e-4), dict(probe="sphere", hold=10)),
        ("tanh-contraction", Reference.static(1.0), dict(probe="sphere", hold=1)),
    ]
    print(f"trials={args.trials} T={args.horizon} repeat={args.repeat} numba={'yes' if HAVE_NUMBA else 'no'}")
    print(f"{'scenario':18s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speedup':>8s} {'max |dy|':>10s}")
    for name, ref, kw in cases:
        sc = get_scenario(name)
        obj = AdversaryObjective(3 * np.eye(2), ref)
        cfg = AttackConfig(T=args.horizon, **kw)
        if HAVE_NUMBA:  # compile outside the timed region
            run_batch(sc, obj, AttackConfig(T=2, **kw), None, [0], 0, backend="numba")
        t_np, r_np = bench("numpy", sc, obj, cfg, args.trials, args.repeat)
        if HAVE_NUMBA:
            t_nb, r_nb = bench("numba", sc, obj, cfg, args.trials, args.repeat)
            diff = max(float(np.max(np.abs(a.y - b.y))) for a, b in zip(r_np, r_nb))
            print(f"{name:18s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.1f} {diff:10.2e}")
        else:
            print(f"{name:18s} {t_np:10.3f} {'-':>10s} {'-':>8s} {'-':>10s}")


if __name__ == "__main__":
    main()
