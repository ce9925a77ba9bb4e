"""``w2`` command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 numerical failure
(non-convergence), 3 I/O error.  Results go to stdout as JSON; everything
meant for humans goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .exact_ot import SolverError, w2_exact
from .inference import NonConvergenceError, clt_one_sample, efron_stein_constant
from .measures import (DiscreteMeasure, MeasureError, SamplableMeasure, SeedSpec,
                       read_distribution, read_points_csv, sample)
from .semidiscrete import NonConvergenceWarning, SolverConfig, solve_semidiscrete, w2_semidiscrete
from .sim import ConfigError, ExperimentConfig, default_threads, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _note(msg: str) -> None:
    print(f"w2: {msg}", file=sys.stderr)


def _seed(args) -> int:
    if args.seed is None:
        _note(f"warning: no --seed given, using {DEFAULT_SEED}")
        return DEFAULT_SEED
    return args.seed


def _verbose(args, resolved: dict) -> None:
    if args.verbose:
        print(json.dumps(resolved, indent=2, sort_keys=True), file=sys.stderr)


def _points(path) -> DiscreteMeasure:
    return read_points_csv(path)


def _dist(path) -> SamplableMeasure:
    return read_distribution(path)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _solver_cfg(args, **overrides) -> SolverConfig:
    base = {}
    if getattr(args, "solver", None):
        base = json.loads(Path(args.solver).read_text())
    base.update({k: v for k, v in overrides.items() if v is not None})
    return SolverConfig.from_dict(base)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_exact(args) -> int:
    P, Q = _points(args.p), _points(args.q)
    _verbose(args, {"subcommand": "exact", "p": args.p, "q": args.q, "plan": args.plan,
                    "dual": args.dual})
    res = w2_exact(P, Q)
    if args.plan:
        with open(args.plan, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "mass"])
            for i, j, m in zip(res.plan.rows, res.plan.cols, res.plan.mass):
                w.writerow([int(i), int(j), repr(float(m))])
    if args.dual:
        _write_json(args.dual, res.dual.to_dict())
    _emit({"w2sq": res.cost, "duality_gap": res.duality_gap(), "plan_nnz": res.plan.nnz})
    return EXIT_OK


def cmd_semidiscrete(args) -> int:
    P, Q = _points(args.support), _dist(args.q)
    seed = _seed(args)
    cfg = _solver_cfg(args, eval_mc=args.mc)
    _verbose(args, {"subcommand": "semidiscrete", "support": args.support, "q": args.q,
                    "seed": seed, "solver": cfg.to_dict(), "out": args.out})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        pot = solve_semidiscrete(P, Q, cfg, seed)
        est = w2_semidiscrete(P, Q, pot, args.mc, SeedSpec(seed, 1))
    out = {**pot.to_dict(), "w2sq": est.w2sq, "se": est.se}
    if args.out:
        _write_json(args.out, out)
    _emit(out)
    if not pot.converged:
        raise NumericalFailure("semi-discrete solver did not converge", pot.diagnostics)
    return EXIT_OK


def cmd_ci(args) -> int:
    P, Q = _points(args.p), _dist(args.q)
    seed = _seed(args)
    if args.n < 1:
        raise UsageError("--n must be positive")
    if not 0 < args.alpha < 1:
        raise UsageError("--alpha must be in (0, 1)")
    cfg = _solver_cfg(args)
    _verbose(args, {"subcommand": "ci", "p": args.p, "q": args.q, "n": args.n,
                    "alpha": args.alpha, "seed": seed, "solver": cfg.to_dict()})
    spec = SeedSpec(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        pot = solve_semidiscrete(P, Q, cfg, spec.with_stream(1))
        if not pot.converged:
            raise NumericalFailure("population potential did not converge", pot.diagnostics)
        draws = sample(P, args.n, spec.with_stream(2))
        try:
            rep = clt_one_sample(P, Q, draws, pot, args.alpha, cfg=cfg, seed=spec.with_stream(3))
        except NonConvergenceError as exc:
            raise NumericalFailure(str(exc)) from None
    _emit(rep.to_dict())
    return EXIT_OK


def cmd_esbound(args) -> int:
    S, Q = _points(args.sample), _dist(args.q)
    seed = _seed(args)
    _verbose(args, {"subcommand": "esbound", "sample": args.sample, "q": args.q,
                    "mc": args.mc, "seed": seed, "n": args.n})
    if S.k < 2 and (S.n_obs or 0) < 2:
        raise UsageError("--sample needs at least 2 points")
    c = efron_stein_constant(S, Q, mc=args.mc, seed=seed)
    out = c.to_dict()
    if args.n:
        out["n"] = args.n
        out["bound"] = c.bound(args.n)
    _emit(out)
    return EXIT_OK


def cmd_sim(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    if "seed" in raw and raw["seed"] != args.seed:
        _note(f"--seed {args.seed} overrides config seed {raw['seed']}")
    raw["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(raw)
    threads = args.threads or default_threads()
    _verbose(args, {"subcommand": "sim", "threads": threads, "out": args.out, **cfg.to_dict()})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        try:
            rep = run_experiment(cfg, threads=threads)
        except NonConvergenceError as exc:
            raise NumericalFailure(str(exc)) from None
    rep.write(args.out)
    _note(f"{cfg.kind}: {len(rep.rows)} replications in {rep.wall_clock:.1f} s -> {args.out}")
    _emit({"out": str(args.out), "kind": cfg.kind, "failed": rep.summary["failed"],
           "config_hash": cfg.config_hash()})
    if rep.summary["failed"]:
        raise NumericalFailure("more than 5% of replications were excluded for non-convergence",
                               {"excluded": rep.summary["excluded"],
                                "attempted": rep.summary["attempted"]})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="w2", description="Quadratic optimal transport, CLT inference and "
                                        "Monte Carlo experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed_required=False):
        p.add_argument("--seed", type=int, required=seed_required,
                       help="root seed for all randomness" + ("" if seed_required else
                                                              f" (default {DEFAULT_SEED}, with a warning)"))
        p.add_argument("--verbose", action="store_true", help="print the resolved config to stderr")

    p = sub.add_parser("exact", help="exact W2^2 between two point files")
    p.add_argument("--p", required=True, help="source points CSV (x1..xd[,weight])")
    p.add_argument("--q", required=True, help="target points CSV")
    p.add_argument("--plan", help="write the optimal plan as CSV i,j,mass")
    p.add_argument("--dual", help="write the dual potentials as JSON")
    p.add_argument("--verbose", action="store_true", help="print the resolved config to stderr")
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("semidiscrete", help="semi-discrete potentials and W2^2")
    p.add_argument("--support", required=True, help="finite support CSV")
    p.add_argument("--q", required=True, help="distribution JSON for Q")
    p.add_argument("--mc", type=int, default=1_000_000,
                   help="Monte Carlo draws for the W2^2 estimate and the convergence check")
    p.add_argument("--solver", help="solver config JSON (keys of SolverConfig)")
    p.add_argument("--out", help="also write the result JSON here")
    common(p)
    p.set_defaults(func=cmd_semidiscrete)

    p = sub.add_parser("ci", help="one-sample CLT confidence interval for a finite-support P")
    p.add_argument("--p", required=True, help="population support CSV")
    p.add_argument("--q", required=True, help="distribution JSON for Q")
    p.add_argument("--n", type=int, required=True, help="sample size drawn from P")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--solver", help="solver config JSON")
    common(p)
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("esbound", help="Efron-Stein variance constant from a sample of P")
    p.add_argument("--sample", required=True, help="sample CSV drawn from P")
    p.add_argument("--q", required=True, help="distribution JSON for Q")
    p.add_argument("--mc", type=int, default=1_000_000, help="draws for the fourth moment of Q")
    p.add_argument("--n", type=int, help="also report the bound C/n at this sample size")
    common(p)
    p.set_defaults(func=cmd_esbound)

    p = sub.add_parser("sim", help="run a Monte Carlo experiment")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory for raw.csv and summary.json")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: machine parallelism)")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_sim)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError("no subcommand given (try --help)")
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _note(f"usage error: {exc}")
        return EXIT_USAGE
    except NumericalFailure as exc:
        _note(f"numerical failure: {exc}")
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, indent=2, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _note(f"I/O error: {exc}")
        return EXIT_IO
    except OSError as exc:
        _note(f"I/O error: {exc}")
        return EXIT_IO
    except (MeasureError, ConfigError, ValueError, TypeError, KeyError) as exc:
        _note(f"invalid input: {exc}")
        return EXIT_USAGE
    except SolverError as exc:
        _note(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
