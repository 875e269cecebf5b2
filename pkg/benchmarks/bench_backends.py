"""Time the compiled run loop against the numpy reference loop.

Both backends receive identical inputs (same problem, same preassembled
noise block), so the comparison isolates the loop implementation. Reported
rate is iterations per second from the best of --repeats timings.
"""

import argparse
import time

import numpy as np

from ekisub import ensemble, linops, problems, subspaces
from ekisub._engine import reference

try:
    from ekisub._engine import _fastloop
except ImportError:
    _fastloop = None


def loop_inputs(inst, max_iters, noise):
    obs = inst.obs
    stats = ensemble.empirical_stats(inst.ens0, obs)
    obasis = subspaces.build_observation_basis(stats, obs)
    sbasis = subspaces.build_state_basis(obasis, stats, obs)
    pobs = subspaces.observation_projectors(obasis, obs.sigma)
    pst = subspaces.state_projectors(sbasis, obs)
    vstar = linops.weighted_pseudoinverse_apply(obs, inst.y)
    return (
        inst.ens0.particles, obs.H, obs.sigma.entries, inst.y, vstar,
        pobs.P, pobs.Q, pobs.N, pst.P, pst.Q, pst.N,
        obasis.W[:, : obasis.r], max_iters, 0.0, noise,
    )


def best_time(fn, args, repeats):
    out, best = None, float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return out, best


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=2000, help="loop iterations per timing")
    ap.add_argument("--repeats", type=int, default=5, help="timings per backend, best kept")
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--d", type=int, default=12)
    ap.add_argument("--h", type=int, default=6)
    ap.add_argument("--J", type=int, default=5)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--stochastic", action="store_true", help="time the noisy variant")
    args = ap.parse_args()

    inst = problems.generate(problems.ProblemSpec(
        n=args.n, d=args.d, target_h=args.h, J=args.J, seed=args.seed,
    ))
    noise = None
    if args.stochastic:
        noise = ensemble.NoiseStream(args.seed, inst.obs.sigma, args.J).draw_block(args.iters)
    loop_args = loop_inputs(inst, args.iters, noise)
    variant = "stochastic" if args.stochastic else "deterministic"
    print(f"problem n={args.n} d={args.d} h={inst.obs.rank_h} J={args.J}, "
          f"{variant}, {args.iters} iterations, best of {args.repeats}")

    ref_out, ref_t = best_time(reference.run_loop, loop_args, args.repeats)
    print(f"  python   {args.iters / ref_t:>12.0f} it/s   ({ref_t:.3f} s)")
    if _fastloop is None:
        print("  compiled backend not built; skipping")
        return 0
    fast_out, fast_t = best_time(_fastloop.run_loop, loop_args, args.repeats)
    print(f"  compiled {args.iters / fast_t:>12.0f} it/s   ({fast_t:.3f} s)")
    print(f"  speedup  {ref_t / fast_t:>12.2f}x")

    gap = float(np.abs(fast_out[0] - ref_out[0]).max())
    print(f"  final-ensemble agreement: max abs gap {gap:.2e}")
    return 0 if gap < 1e-10 else 1


if __name__ == "__main__":
    raise SystemExit(main())
