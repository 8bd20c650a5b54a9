"""Command line interface.

Settings are resolved as: command-line flags > ``--config`` file > defaults.
The config file is flat ``key = value`` lines (keys are flag names without the
leading dashes; ``#`` starts a comment).

Exit codes: 0 success, 1 usage error, 2 some run did not converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import ExperimentPlan, manufactured_convergence_study, run_experiment
from .fespace import SCOTT_VOGELIUS, TAYLOR_HOOD
from .problems import ProblemSpec
from .solvers import _NUDGED, CDA_IPY, CDA_PICARD, HYBRID, IPY, SOLVER_KINDS

DEFAULTS = {
    "problem": "cavity", "re": 100.0, "mesh_n": None, "coarse_h": None, "mu": 1.0, "gamma": 1.0,
    "solver": None, "tol": 1e-8, "max_iter": 100, "snr": None, "svd_rank": None, "seed": 0,
    "out": "out", "elements": TAYLOR_HOOD, "timing": False, "window": 10, "switch_tol": 1e-2,
}
_FLOAT = {"re", "mu", "gamma", "tol", "switch_tol"}
_INT = {"max_iter", "seed", "window"}
_BOOL = {"timing"}

_COMMANDS = {
    "solve": "single solver run",
    "sweep-h": "nudged IPY over a list of coarse sizes H, plus the un-nudged baseline",
    "noise-study": "nudged runs with noisy data over a list of SNR values",
    "svd-study": "hybrid runs with SVD-compressed data over a list of ranks",
    "compare": "nudged IPY against nudged Picard at the same settings",
    "verify": "manufactured-solution convergence study",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdaipy", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, help_ in _COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--problem", choices=["cavity", "channel", "manufactured"])
        p.add_argument("--re", help="Reynolds number (cavity: 1/nu, channel: 0.1/nu)")
        p.add_argument("--mesh-n", dest="mesh_n",
                       help="cavity/manufactured subdivisions (default 64); comma list for verify; channel: NXxNY")
        p.add_argument("--coarse-h", dest="coarse_h", help="coarse size H, or comma list (e.g. 1/8,1/16)")
        p.add_argument("--mu", help="nudging parameter (default 1)")
        p.add_argument("--gamma", help="grad-div parameter (default 1)")
        p.add_argument("--solver", help=f"one of {', '.join(SOLVER_KINDS)} (comma list allowed)")
        p.add_argument("--tol", help="residual tolerance (default 1e-8)")
        p.add_argument("--max-iter", dest="max_iter")
        p.add_argument("--snr", help="noise level, or comma list")
        p.add_argument("--svd-rank", dest="svd_rank", help="SVD rank, or comma list")
        p.add_argument("--seed")
        p.add_argument("--out", help="output directory (default ./out)")
        p.add_argument("--elements", choices=[TAYLOR_HOOD, SCOTT_VOGELIUS])
        p.add_argument("--window", help="trailing window for contraction rates (default 10)")
        p.add_argument("--switch-tol", dest="switch_tol", help="hybrid switch threshold (default 1e-2)")
        p.add_argument("--config", help="flat key=value file")
        p.add_argument("--timing", action="store_const", const=True, default=None,
                       help="write wall times into the CSVs (makes them non-reproducible)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.lstrip("-").replace("-", "_")
        if k not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown key {k!r}")
        out[k] = v
    return out


def _number(s: str) -> float:
    s = str(s).strip()
    if "/" in s:
        a, b = s.split("/", 1)
        return float(a) / float(b)
    return float(s)


def _list(v, conv):
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        return [conv(x) for x in v]
    return [conv(x) for x in str(v).split(",") if x.strip()]


def resolve(args) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(read_config(args.config))
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = v
    try:
        for k in _FLOAT:
            settings[k] = _number(settings[k])
        for k in _INT:
            settings[k] = int(settings[k])
        for k in _BOOL:
            if isinstance(settings[k], str):
                settings[k] = settings[k].lower() in ("1", "true", "yes", "on")
        settings["coarse_h"] = _list(settings["coarse_h"], _number)
        settings["snr"] = _list(settings["snr"], _number)
        settings["svd_rank"] = _list(settings["svd_rank"], int)
        settings["solver"] = _list(settings["solver"], str)
    except ValueError as exc:
        raise UsageError(f"bad value: {exc}") from exc
    for s in settings["solver"] or []:
        if s not in SOLVER_KINDS:
            raise UsageError(f"unknown solver {s!r}; choose from {', '.join(SOLVER_KINDS)}")
    return settings


def _problem(settings, n=None) -> ProblemSpec:
    name = settings["problem"]
    kw = {"pressure_kind": settings["elements"]}
    mesh = settings["mesh_n"] if n is None else n
    if mesh is not None:
        if name == "channel":
            try:
                nx, ny = (int(x) for x in str(mesh).lower().split("x"))
            except ValueError as exc:
                raise UsageError("channel --mesh-n takes NXxNY, e.g. 88x41") from exc
            kw.update(nx=nx, ny=ny)
        else:
            kw["n"] = int(mesh)
    if name == "manufactured":
        return ProblemSpec(name, nu=1.0 / settings["re"], **kw)
    return ProblemSpec(name, re=settings["re"], **kw)


def _default_H(problem: ProblemSpec):
    """Channel: 0.05. Square: 1/8, 1/16, 1/32, keeping only sizes the mesh supports."""
    if problem.name == "channel":
        return [0.05]
    ok = [1 / 8, 1 / 16, 1 / 32]
    return [H for H in ok if problem.n % round(1 / H) == 0] or [1.0 / problem.n]


def _plan(settings, solvers, H=None, snr=None, ranks=None) -> ExperimentPlan:
    problem = _problem(settings)
    return ExperimentPlan(
        problem=problem, solvers=solvers, H=H or settings["coarse_h"] or _default_H(problem),
        out=settings["out"], mu=settings["mu"], gamma=settings["gamma"], tol=settings["tol"],
        max_iter=settings["max_iter"], snr=snr or [0.0], svd_ranks=ranks or [], seeds=[settings["seed"]],
        window=settings["window"], timing=settings["timing"], switch_tol=settings["switch_tol"],
        with_reference=problem.name != "manufactured",
    )


def _report(summary) -> int:
    failed = 0
    for run in summary["runs"]:
        flag = "converged" if run.get("converged") else "NOT converged"
        extra = run.get("error") or run.get("status", "")
        rate = run.get("contraction_rate")
        rate_s = f" rate={rate:.4f}" if rate is not None else ""
        print(f"{run['key']}: {flag} after {run.get('iterations', '?')} iterations{rate_s} ({extra})")
        failed += not run.get("converged")
    return 2 if failed else 0


def cmd_solve(settings) -> int:
    solver = (settings["solver"] or [CDA_IPY])[0]
    problem = _problem(settings)
    if solver not in _NUDGED or settings["mu"] == 0:
        H = [None]
    else:
        H = settings["coarse_h"] or _default_H(problem)[-1:]
    plan = _plan(settings, [solver], H=H[:1], snr=settings["snr"], ranks=settings["svd_rank"])
    plan.with_reference = problem.name != "manufactured" and solver in (CDA_IPY, CDA_PICARD, HYBRID) \
        and settings["mu"] > 0
    summary = run_experiment(plan)
    code = _report(summary)
    run = summary["runs"][0]
    if "csv" in run:
        print(f"wrote {Path(plan.out) / run['csv']}")
    return code


def cmd_sweep_h(settings) -> int:
    solvers = settings["solver"] or [IPY, CDA_IPY]
    return _report(run_experiment(_plan(settings, solvers)))


def cmd_noise(settings) -> int:
    solvers = settings["solver"] or [CDA_IPY]
    snr = settings["snr"] or [0.0, 0.01, 0.05]
    problem = _problem(settings)
    H = settings["coarse_h"] or (_default_H(problem)[-1:])
    return _report(run_experiment(_plan(settings, solvers, H=H, snr=snr)))


def cmd_svd(settings) -> int:
    solvers = settings["solver"] or [HYBRID]
    ranks = settings["svd_rank"] or [2, 4, 8, 16]
    return _report(run_experiment(_plan(settings, solvers, H=settings["coarse_h"] or [1 / 32], ranks=ranks)))


def cmd_compare(settings) -> int:
    problem = _problem(settings)
    H = settings["coarse_h"] or _default_H(problem)[-1:]
    return _report(run_experiment(_plan(settings, [CDA_IPY, CDA_PICARD], H=H)))


def cmd_verify(settings) -> int:
    ns = _list(settings["mesh_n"], int) or [8, 16, 32]
    study = manufactured_convergence_study(ns, nu=1.0 / settings["re"] if settings["re"] else 1.0,
                                           pressure_kind=settings["elements"], tol=min(settings["tol"], 1e-10))
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.json").write_text(json.dumps(study, indent=2, sort_keys=True) + "\n")
    for r in study["rows"]:
        print(f"n={r['n']:4d}  |u-uh|_1={r['u_H1']:.4e}  |p-ph|={r['p_L2']:.4e}  |u-uh|={r['u_L2']:.4e}")
    print("slopes: " + ", ".join(f"{k}={v:.3f}" for k, v in study["slopes"].items()))
    return 0


_HANDLERS = {"solve": cmd_solve, "sweep-h": cmd_sweep_h, "noise-study": cmd_noise, "svd-study": cmd_svd,
             "compare": cmd_compare, "verify": cmd_verify}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        settings = resolve(args)
        if args.command == "verify" and settings["problem"] != "manufactured":
            settings["problem"] = "manufactured"
            if args.re is None and "re" not in (read_config(args.config) if args.config else {}):
                settings["re"] = 1.0
        return _HANDLERS[args.command](settings)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"cdaipy: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
