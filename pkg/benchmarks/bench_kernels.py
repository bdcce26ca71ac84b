"""Compare the numba and numpy implementations of the affine dynamics kernels.

    python3 benchmarks/bench_kernels.py [--iters N] [--replicas R] [--repeat K]

Times a single long trajectory (noisy duopoly, two-timescale hierarchical
rule) and a batched lock-in estimate (scalar zero-sum game), and checks that
both backends agree.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from stackdyn import kernels
from stackdyn.dynamics import LockInSpec, NoiseModel, RunConfig, Schedule, SimGrad, Stackelberg, lockin_curve, run
from stackdyn.games import duopoly_game, scalar_quadratic
from stackdyn.oracle import JointPoint


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iters", type=int, default=100_000)
    ap.add_argument("--replicas", type=int, default=1000)
    ap.add_argument("--lockin-iters", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    duo = duopoly_game()
    cfg = RunConfig(
        Stackelberg(),
        (Schedule.polynomial(1.0, 1.0), Schedule.polynomial(1.0, 2 / 3)),
        JointPoint([50.0], [50.0]),
        args.iters,
        NoiseModel("gaussian", (10**0.5, 10**0.5), seed=1),
        record_every=100,
    )
    q = scalar_quadratic(1, 2, 1)
    lcfg = RunConfig(
        SimGrad(),
        (Schedule.polynomial(0.5, 0.6), Schedule.polynomial(0.5, 0.6)),
        JointPoint([0.0], [0.0]),
        args.lockin_iters,
        NoiseModel("gaussian", (0.1, 0.1), seed=1),
    )
    spec = LockInSpec(JointPoint([0.0], [0.0]), 0.1, n_bar=args.lockin_iters // 2, q0=0.5, replicas=args.replicas)

    print(f"numba available: {kernels.HAS_NUMBA}; default backend: {kernels.backend()}")
    # compile outside the timed region
    run(RunConfig(cfg.rule, cfg.schedules, cfg.x0, 10, cfg.noise), duo, use_numba=True)
    lockin_curve(RunConfig(lcfg.rule, lcfg.schedules, lcfg.x0, 10, lcfg.noise), q, LockInSpec(spec.target, 0.1, 5, 0.5, 4), [0.1], use_numba=True)

    rows = []
    for label, fn in (
        (f"rollout ({args.iters} steps)", lambda b: run(cfg, duo, use_numba=b)),
        (f"lock-in ({args.replicas} x {args.lockin_iters})", lambda b: lockin_curve(lcfg, q, spec, [0.05, 0.1, 0.5], use_numba=b)),
    ):
        t_nb = best_of(lambda: fn(True), args.repeat)
        t_np = best_of(lambda: fn(False), args.repeat)
        rows.append((label, t_nb, t_np))

    a, b = run(cfg, duo, use_numba=True), run(cfg, duo, use_numba=False)
    drift = float(np.max(np.abs(a.X - b.X)))
    la = lockin_curve(lcfg, q, spec, [0.1], use_numba=True)[0]
    lb = lockin_curve(lcfg, q, spec, [0.1], use_numba=False)[0]

    print(f"{'kernel':<34}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for label, t_nb, t_np in rows:
        print(f"{label:<34}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>9.1f}x")
    print(f"max |x_numba - x_numpy| over recorded states: {drift:.3e}")
    print(f"lock-in p_hat numba={la.p_hat:.4f} numpy={lb.p_hat:.4f}")


if __name__ == "__main__":
    main()
