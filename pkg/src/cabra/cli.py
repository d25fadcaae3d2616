"""Command-line front end.

Subcommands: design, validate, solve, simulate, experiment.  Exit codes:
0 success (and convergence where applicable), 2 validation failure,
3 iteration budget exhausted before convergence, 4 I/O or schema error.
With --json a machine-readable summary is printed to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import decentral, design_sdp, files, matparams, probgen, solver
from .errors import CabraError, Infeasible, InvalidParams, SchemaError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MAXIT = 3
EXIT_IO = 4


def _emit(args, summary: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    elif text:
        print(text)


def cmd_validate(args) -> int:
    params = files.load_params(args.params)
    cs = files.load_problem(args.problem)[0] if args.problem else None
    if cs is None and args.structure:
        from . import structure
        cs = structure.load_structure(args.structure)
    report = matparams.validate(cs, params, tol=args.tol)
    summary = {
        "ok": report.ok,
        "checks": len(report.checks),
        "failures": [
            {"k": c.k, "check": c.name, "violation": c.violation} for c in report.failures()
        ],
    }
    _emit(args, summary, report.as_table())
    return EXIT_OK if report.ok else EXIT_VALIDATION


def _load_solver_inputs(args):
    cs, ops, defaults, inline_params = files.load_problem(args.problem)
    params = inline_params
    if args.params:
        params = files.load_params(args.params)
    if params is None:
        raise SchemaError("no parameters: supply --params or embed them in the problem file")
    alpha = args.alpha if args.alpha is not None else defaults.get("alpha", 2.0)
    gamma = args.gamma if args.gamma is not None else defaults.get("gamma")
    config = solver.SolverConfig(
        alpha=alpha, gamma=gamma, max_iterations=args.maxit, tol=args.tol,
        trace_every=args.trace_every, threads=args.threads,
    )
    return cs, ops, params, config


def cmd_solve(args) -> int:
    cs, ops, params, config = _load_solver_inputs(args)
    result = solver.run_cabra(cs, params, ops, config, mode=args.mode)
    if args.trace:
        files.write_trace_csv(result.trace, args.trace)
    summary = {
        "converged": result.converged,
        "converged_iteration": result.converged_iteration,
        "iterations": result.iterations,
        "fp_residual": result.trace.fp_residual[-1],
        "inclusion_residual": result.trace.inclusion_residual[-1],
        "solution": [float(v) for v in result.y],
    }
    text = (
        f"{'converged' if result.converged else 'not converged'} "
        f"after {result.iterations} iterations "
        f"(fp {result.trace.fp_residual[-1]:.3e}, incl {result.trace.inclusion_residual[-1]:.3e})"
    )
    _emit(args, summary, text)
    return EXIT_OK if result.converged else EXIT_MAXIT


def cmd_simulate(args) -> int:
    cs, ops, params, config = _load_solver_inputs(args)
    result, log = decentral.simulate(cs, params, ops, config)
    if args.trace:
        files.write_trace_csv(result.trace, args.trace)
    if args.message_log:
        files.write_message_csv(log, args.message_log)
    counts = decentral.count_messages(log)
    summary = {
        "converged": result.converged,
        "converged_iteration": result.converged_iteration,
        "iterations": result.iterations,
        "messages_per_iteration": counts.messages_per_iteration,
        "scalars_per_iteration": counts.scalars_per_iteration,
    }
    text = (
        f"{'converged' if result.converged else 'not converged'} "
        f"after {result.iterations} iterations; "
        f"{counts.messages_per_iteration} messages/iteration "
        f"({counts.scalars_per_iteration} scalars)"
    )
    _emit(args, summary, text)
    return EXIT_OK if result.converged else EXIT_MAXIT


def _parse_pattern_file(path, n, m):
    doc = files._load_json(path)
    def pairs(key):
        return frozenset((int(a), int(b)) for a, b in doc.get(key, []))
    return {
        "zero_Z": pairs("zero_Z"), "zero_W": pairs("zero_W"),
        "zero_K": pairs("zero_K"), "zero_Q": pairs("zero_Q"),
        "skj": tuple(int(s) for s in doc["skj"]) if "skj" in doc else None,
        "w_equals_z": bool(doc.get("w_equals_z", False)),
    }


def cmd_design(args) -> int:
    beta = tuple(float(b) for b in args.beta.split(",")) if args.beta else ()
    if args.m and not beta:
        beta = tuple(1.0 for _ in range(args.m))
    pattern = {}
    if args.pattern_file:
        pattern = _parse_pattern_file(args.pattern_file, args.n, args.m)
    skj = pattern.get("skj")
    if skj is None:
        skj = tuple(min(t, args.n - 2) for t in range(args.m))
    objective = None
    if args.objective == "lambda_max":
        objective = "lambda_max"
    elif args.objective not in (None, "none"):
        raise SchemaError(f"unsupported objective {args.objective!r} on the command line")
    spec = design_sdp.DesignSpec(
        n=args.n, m=args.m, beta=beta, c=args.c, objective=objective,
        w_equals_z=pattern.get("w_equals_z", args.w_equals_z),
        skj=skj,
        zero_Z=pattern.get("zero_Z", frozenset()),
        zero_W=pattern.get("zero_W", frozenset()),
        zero_K=pattern.get("zero_K", frozenset()),
        zero_Q=pattern.get("zero_Q", frozenset()),
    )
    if args.emit_sdpa:
        design_sdp.emit_sdpa(design_sdp.build_sdp(spec), args.emit_sdpa)
    summary = {"n": args.n, "m": args.m, "c": args.c, "emitted": bool(args.emit_sdpa)}
    if args.solve_feasibility or args.out:
        result = design_sdp.design_solve(spec) if objective else design_sdp.feasibility_solve(spec)
        summary.update({
            "residual": result.residual,
            "iterations": result.iterations,
            "fiedler": design_sdp.check_fiedler(result.W),
        })
        if args.out:
            pars = matparams.from_blocks(
                [result.Z], [result.W],
                [result.K if args.m else None], [result.Q if args.m else None],
                [np.asarray(beta)], (skj,),
            )
            files.save_params(pars, args.out)
    _emit(args, summary, json.dumps(summary))
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = probgen.ExperimentSpec(
        name=args.name, seed=args.seed, trials=args.trials, scale=args.scale,
        max_iterations=args.maxit, alpha=args.alpha, gamma=args.gamma,
    )
    manifest = probgen.run_experiment(spec, args.out)
    summary = {
        "name": spec.name,
        "trials": spec.trials,
        "variants": manifest["variants"],
        "out": args.out,
    }
    _emit(args, summary, f"wrote {args.out}/manifest.json with variants {manifest['variants']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cabra", description=__doc__)
    ap.add_argument("--json", action="store_true", help="print a JSON summary to stdout")
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a parameter bundle against the assumptions")
    v.add_argument("--params", required=True)
    v.add_argument("--structure", help="structure JSON (for cutoff checks)")
    v.add_argument("--problem", help="problem JSON providing the structure")
    v.add_argument("--tol", type=float, default=1e-8)
    v.set_defaults(fn=cmd_validate)

    def add_solver_args(p):
        p.add_argument("--problem", required=True)
        p.add_argument("--params", help="parameter bundle (else embedded in the problem)")
        p.add_argument("--alpha", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--maxit", type=int, default=10000)
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--trace", help="write the iteration trace CSV here")
        p.add_argument("--trace-every", type=int, default=1)
        p.add_argument("--threads", type=int, default=None)

    s = sub.add_parser("solve", help="run the splitting iteration")
    add_solver_args(s)
    s.add_argument("--mode", choices=("z", "v"), default="v")
    s.set_defaults(fn=cmd_solve)

    d = sub.add_parser("simulate", help="run the decentralized node simulation")
    add_solver_args(d)
    d.add_argument("--message-log", help="write per-message CSV here")
    d.set_defaults(fn=cmd_simulate)

    g = sub.add_parser("design", help="build/solve a parameter-design problem")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, default=0)
    g.add_argument("--beta", help="comma-separated cocoercivity constants")
    g.add_argument("--c", type=float, default=1.0)
    g.add_argument("--objective", choices=("none", "lambda_max"), default="none")
    g.add_argument("--pattern-file", help="JSON with zero_Z/zero_W/zero_K/zero_Q/skj")
    g.add_argument("--w-equals-z", action="store_true")
    g.add_argument("--emit-sdpa", help="write the problem in sparse SDPA format")
    g.add_argument("--solve-feasibility", action="store_true")
    g.add_argument("--out", help="write solved parameters as a one-block bundle")
    g.set_defaults(fn=cmd_design)

    e = sub.add_parser("experiment", help="generate and run a bundled experiment")
    e.add_argument("--name", required=True, choices=probgen.EXPERIMENT_NAMES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--trials", type=int, default=1)
    e.add_argument("--scale", type=float, default=1.0)
    e.add_argument("--maxit", type=int, default=500)
    e.add_argument("--alpha", type=float)
    e.add_argument("--gamma", type=float)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_experiment)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidParams, Infeasible) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CabraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
