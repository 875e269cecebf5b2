"""Command-line interface: generate problems, run experiments, verify files.

Exit codes: 0 success, 2 bad configuration or flags, 3 IO/runtime failure,
4 asserted invariant failed. Output location defaults to $EKISUB_OUTPUT_DIR
or ./ekisub-out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import diagnostics, ensemble, idealized, problems
from ._engine import backend_name
from .errors import EkisubError, NonPositiveValues, ValidationError

TRACE_HEADER = "iter,particle,variant,P_theta,Q_theta,N_theta,P_omega,Q_omega,N_omega"
EIG_HEADER = "iter,index,delta"

RUN_VARIANTS = ("deterministic", "stochastic", "idealized-stochastic")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; echoed verbatim into report.json."""

    problem_path: str | None
    n: int
    d: int
    h: int
    J: int
    problem_seed: int
    noise_on_data: bool
    variant: str
    iters: int
    replications: int
    seed: int
    stop_tol: float
    paired_noise: bool
    fit_min: int
    fit_max: int
    tol: float | None
    out: str


def _default_out() -> str:
    return os.environ.get("EKISUB_OUTPUT_DIR", os.path.join(os.curdir, "ekisub-out"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ekisub",
        description="Ensemble Kalman inversion with fundamental-subspace diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw a reproducible problem file")
    g.add_argument("--n", type=int, default=8, help="observation dimension")
    g.add_argument("--d", type=int, default=12, help="state dimension")
    g.add_argument("--h", type=int, default=6, help="rank of the forward map")
    g.add_argument("--J", type=int, default=5, help="ensemble size")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--no-noise", action="store_true",
                   help="use exact data y = H v_dagger instead of noisy data")
    g.add_argument("--out", default=None, help="output path (default <outdir>/problem.json)")

    r = sub.add_parser("run", help="run an experiment and write trace/report files")
    r.add_argument("--problem", default=None, help="problem file; omit to generate one")
    r.add_argument("--n", type=int, default=8)
    r.add_argument("--d", type=int, default=12)
    r.add_argument("--h", type=int, default=6)
    r.add_argument("--J", type=int, default=5)
    r.add_argument("--problem-seed", type=int, default=42)
    r.add_argument("--no-noise", action="store_true")
    r.add_argument("--variant", choices=RUN_VARIANTS, default="deterministic")
    r.add_argument("--iters", type=int, default=100)
    r.add_argument("--replications", type=int, default=1)
    r.add_argument("--seed", type=int, default=0, help="master noise seed")
    r.add_argument("--stop-tol", type=float, default=0.0)
    r.add_argument("--tol", type=float, default=None,
                   help="override every asserted invariant tolerance")
    noise = r.add_mutually_exclusive_group()
    noise.add_argument("--paired-noise", dest="paired_noise", action="store_true",
                       help="idealized runs reuse the exact noise stream of the "
                            "stochastic run with the same seed")
    noise.add_argument("--fresh-noise", dest="paired_noise", action="store_false")
    r.set_defaults(paired_noise=False)
    r.add_argument("--fit-min", type=int, default=None,
                   help="lower end of the rate-fit window (default iters//100)")
    r.add_argument("--fit-max", type=int, default=None,
                   help="upper end of the rate-fit window (default iters)")
    r.add_argument("--out", default=None, help="output directory")

    v = sub.add_parser("verify", help="load a problem file and run the invariant battery")
    v.add_argument("--problem", required=True)
    v.add_argument("--variant", choices=("deterministic", "stochastic"),
                   default="deterministic")
    v.add_argument("--iters", type=int, default=50)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol", type=float, default=None)
    return parser


def _spec_from_args(args) -> problems.ProblemSpec:
    spec = problems.ProblemSpec(
        n=args.n, d=args.d, target_h=args.h, J=args.J,
        seed=getattr(args, "problem_seed", args.seed),
        noise_on_data=not args.no_noise,
    )
    spec.validate()
    return spec


def cmd_generate(args) -> int:
    spec = _spec_from_args(args)
    inst = problems.generate(spec)
    out = args.out
    if out is None:
        os.makedirs(_default_out(), exist_ok=True)
        out = os.path.join(_default_out(), "problem.json")
    else:
        parent = os.path.dirname(os.path.abspath(out))
        os.makedirs(parent, exist_ok=True)
    problems.save(inst, out)
    print(f"wrote {out} (n={spec.n} d={spec.d} h={spec.target_h} J={spec.J} "
          f"seed={spec.seed})")
    return 0


def _load_or_generate(args) -> problems.ProblemInstance:
    if args.problem is not None:
        return problems.load(args.problem)
    return problems.generate(_spec_from_args(args))


def _write_trace(path: str, trace: diagnostics.RunTrace) -> None:
    lines = [TRACE_HEADER]
    for i in range(trace.n_records):
        it = int(trace.iterations[i])
        for j in range(trace.n_particles):
            vals = ",".join(repr(float(trace.norms[q][i, j])) for q in diagnostics.QUANTITIES)
            lines.append(f"{it},{j},{trace.variant},{vals}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_eigenvalues(path: str, trace: diagnostics.RunTrace) -> None:
    lines = [EIG_HEADER]
    r = trace.eigenvalues.shape[1]
    for i in range(trace.n_records):
        it = int(trace.iterations[i])
        for k in range(r):
            lines.append(f"{it},{k},{repr(float(trace.eigenvalues[i, k]))}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _fit_or_none(trace, quantity, window):
    try:
        fit = diagnostics.fit_rate(trace, quantity, window)
    except NonPositiveValues:
        return None
    return {"slope": fit.slope, "intercept": fit.intercept,
            "r_squared": fit.r_squared, "i_range": list(fit.i_range)}


def cmd_run(args) -> int:
    inst = _load_or_generate(args)
    if args.iters < 1:
        raise ValidationError(f"--iters must be >= 1, got {args.iters}")
    if args.replications < 1:
        raise ValidationError(f"--replications must be >= 1, got {args.replications}")
    out_dir = args.out if args.out is not None else _default_out()
    os.makedirs(out_dir, exist_ok=True)
    fit_lo = args.fit_min if args.fit_min is not None else max(1, args.iters // 100)
    fit_hi = args.fit_max if args.fit_max is not None else args.iters
    config = ExperimentConfig(
        problem_path=args.problem, n=inst.spec.n, d=inst.spec.d, h=inst.spec.target_h,
        J=inst.spec.J, problem_seed=inst.spec.seed, noise_on_data=inst.spec.noise_on_data,
        variant=args.variant, iters=args.iters, replications=args.replications,
        seed=args.seed, stop_tol=args.stop_tol, paired_noise=args.paired_noise,
        fit_min=fit_lo, fit_max=fit_hi, tol=args.tol, out=out_dir,
    )

    reps = []
    for k in range(args.replications):
        suffix = "" if args.replications == 1 else f"_rep{k:03d}"
        rep_seed = np.random.SeedSequence(entropy=args.seed, spawn_key=(k,))
        if args.variant == "idealized-stochastic":
            if not args.paired_noise:
                rep_seed = np.random.SeedSequence(entropy=args.seed, spawn_key=(k, 1))
            _, trace = idealized.run_idealized(
                inst.ens0, inst.obs, inst.y, max_iters=args.iters, rng_seed=rep_seed
            )
            final_mean = None
        else:
            ens, trace = ensemble.run(
                inst.ens0, inst.obs, inst.y, variant=args.variant,
                max_iters=args.iters, stop_tol=args.stop_tol, rng_seed=rep_seed,
            )
            final_mean = ens.particles.mean(axis=1).tolist()
        _write_trace(os.path.join(out_dir, f"trace{suffix}.csv"), trace)
        _write_eigenvalues(os.path.join(out_dir, f"eigenvalues{suffix}.csv"), trace)
        reps.append({
            "replication": k,
            "records": trace.n_records,
            "final_mean": final_mean,
            "fits": {
                "P_theta": _fit_or_none(trace, "P_theta", (fit_lo, fit_hi)),
                "P_omega": _fit_or_none(trace, "P_omega", (fit_lo, fit_hi)),
            },
        })

    battery_variant = "deterministic" if args.variant == "deterministic" else "stochastic"
    report_battery = diagnostics.invariant_battery(
        inst, variant=battery_variant, iters=min(args.iters, 100),
        rng_seed=args.seed, tol_override=args.tol,
    )
    slopes = {}
    for q in ("P_theta", "P_omega"):
        vals = [r["fits"][q]["slope"] for r in reps if r["fits"][q] is not None]
        slopes[q] = None if not vals else float(np.mean(vals))
    report = {
        "config": asdict(config),
        "backend": backend_name(),
        "battery": report_battery.to_json(),
        "battery_pass": report_battery.all_pass,
        "replications": reps,
        "mean_slopes": slopes,
    }
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", newline="\n") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out_dir} (records={reps[0]['records']}, "
          f"battery={'pass' if report_battery.all_pass else 'FAIL'})")
    return 0 if report_battery.all_pass else 4


def cmd_verify(args) -> int:
    inst = problems.load(args.problem)
    if args.iters < 1:
        raise ValidationError(f"--iters must be >= 1, got {args.iters}")
    report = diagnostics.invariant_battery(
        inst, variant=args.variant, iters=args.iters,
        rng_seed=args.seed, tol_override=args.tol,
    )
    for c in report.checks:
        mark = "PASS" if c.passed else "FAIL"
        line = f"[{mark}] {c.name}: measured={c.measured:.3e} tolerance={c.tolerance:.3e}"
        if not c.asserted:
            line += f" (informational{': ' + c.note if c.note else ''})"
        print(line)
    ok = report.all_pass
    print(f"{'all asserted checks passed' if ok else 'ASSERTED CHECK FAILED'} "
          f"({len(report.checks)} checks, variant={report.variant})")
    return 0 if ok else 4


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "run":
            return cmd_run(args)
        return cmd_verify(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EkisubError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
