"""Experiment drivers: reference solutions, H/SNR/SVD studies, solver comparisons,
manufactured-solution verification and output writers (CSV, JSON, VTK, gnuplot)."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import add_noise, data_noise_norm, extract_partial_data, svd_compress, svd_reconstruct, write_data_csv
from .mesh import admissible_H, write_vtk
from .problems import Discretization, ProblemSpec
from .solvers import (NEWTON, PICARD, SolverConfig, _NUDGED, contraction_rate, run_solver)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["k", "residual_Hdual", "residual_plain", "error_L2", "error_H1", "div_norm", "phase",
               "wall_ms", "residual_div", "linear_iters"]


class ReferenceError_(RuntimeError):
    pass


# ----------------------------------------------------------------------------- references

def _continuation(disc: Discretization, tol: float, start_re: float):
    """Newton continuation in Re from a Picard solve at ``start_re``."""
    target = disc.problem.re
    scale = disc.nu * target
    re = min(target, start_re)
    first = run_solver(disc, SolverConfig(nu=scale / re, solver=PICARD, mu=0.0, max_iter=200,
                                          tol_residual=1e-9))
    if not first.converged:
        raise ReferenceError_(f"Picard start at Re={re:g} failed: {first.status}")
    u, p = first.state.u, first.state.p
    done, step = re, max(target / 6, 1.0)
    while True:
        trial = min(target, done + step)
        res = run_solver(disc, SolverConfig(nu=scale / trial, solver=NEWTON, mu=0.0, max_iter=25,
                                            tol_residual=tol if trial == target else 1e-9),
                         u0=u, p0=p)
        if res.converged:
            u, p, done = res.state.u, res.state.p, trial
            log.info("continuation: Re=%g in %d Newton steps", trial, res.iterations)
            if done == target:
                return u, p, res.final_residual
        else:
            log.info("continuation: Re=%g failed (%s), halving the step", trial, res.status)
            step /= 2
            if step < 1e-3 * target:
                raise ReferenceError_(f"continuation stalled near Re={done:g}: {res.status}")


def compute_reference(problem: ProblemSpec, cache_dir: str | Path | None = None, tol: float = 1e-11,
                      disc: Discretization | None = None, start_re: float = 20.0):
    """Reference (u, p) for a problem, solved to ``tol`` and cached as .npz by problem key."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"reference-{problem.key()}.npz"
        if path.exists():
            z = np.load(path)
            return z["u"], z["p"]
    disc = disc if disc is not None else Discretization(problem)
    if problem.re <= start_re:
        res = run_solver(disc, SolverConfig(nu=problem.nu, solver=NEWTON, mu=0.0, max_iter=25,
                                            tol_residual=tol),
                         u0=run_solver(disc, SolverConfig(nu=problem.nu, solver=PICARD, mu=0.0,
                                                          max_iter=200, tol_residual=1e-8)).state.u)
        if not res.converged:
            raise ReferenceError_(res.status)
        u, p = res.state.u, res.state.p
    else:
        u, p, _ = _continuation(disc, tol, start_re)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, u=u, p=p)
    return u, p


def reference_max(u: np.ndarray, n_scalar: int) -> float:
    """Largest velocity magnitude over the nodal values."""
    return float(np.max(np.hypot(u[:n_scalar], u[n_scalar:])))


# ----------------------------------------------------------------------------- CSV / JSON

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def records_to_csv(records, timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(r.k), _fmt(r.residual_Hdual), _fmt(r.residual_plain), _fmt(r.error_L2),
                    _fmt(r.error_H1), _fmt(r.div_norm), r.phase, _fmt(r.wall_ms) if timing else "",
                    _fmt(r.residual_div), _fmt(r.linear_iterations)])
    return buf.getvalue()


def read_convergence_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary_rate(residuals, window: int, tol: float):
    """Contraction rate with the window shrunk to the available data; (rate, window) or (None, 0)."""
    usable = [r for r in residuals if r >= 100 * tol]
    w = min(window, len(usable) - 1)
    if w < 2:
        return None, 0
    return contraction_rate(usable, w, tol), w


# ----------------------------------------------------------------------------- plans

@dataclass
class ExperimentPlan:
    problem: ProblemSpec
    solvers: list
    H: list
    out: str | Path
    mu: float = 1.0
    gamma: float = 1.0
    tol: float = 1e-8
    max_iter: int = 100
    snr: list = field(default_factory=lambda: [0.0])
    svd_ranks: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    window: int = 10
    timing: bool = False
    with_reference: bool = True
    switch_tol: float = 1e-2
    cache_dir: str | Path | None = None

    def __post_init__(self):
        if not self.solvers:
            raise ValueError("an experiment needs at least one solver")
        if not self.H:
            raise ValueError("an experiment needs at least one coarse size H")
        mesh = self.problem.build_mesh()
        ok = admissible_H(mesh)
        for H in self.H:
            if H is not None and not any(abs(H - a) <= 1e-12 * max(1.0, a) for a in ok):
                shown = ", ".join(f"{a:g}" for a in ok[:8])
                raise ValueError(f"H={H:g} is not admissible for this mesh; admissible: {shown}, ...")


def _run_key(solver, H, seed, snr, rank):
    parts = [solver, "H-none" if H is None else f"H{H:.6g}", f"seed{seed}"]
    if snr:
        parts.append(f"snr{snr:g}")
    if rank:
        parts.append(f"svd{rank}")
    return "_".join(parts)


def _enumerate_runs(plan: ExperimentPlan):
    runs = []
    for solver in plan.solvers:
        nudged = solver in _NUDGED and plan.mu > 0
        for H in (plan.H if nudged else [None]):
            for seed in (plan.seeds if nudged else [plan.seeds[0]]):
                for snr in (plan.snr if nudged else [0.0]):
                    for rank in ((plan.svd_ranks or [None]) if nudged else [None]):
                        runs.append((solver, H, seed, snr, rank))
    seen, unique = set(), []
    for r in runs:
        key = _run_key(*r)
        if key not in seen:
            seen.add(key)
            unique.append(r)
    return unique


def run_experiment(plan: ExperimentPlan) -> dict:
    """Run every (solver, H, seed, SNR, rank) combination; write one CSV per run and summary.json.

    Failures of individual runs are recorded and the experiment continues.
    """
    out = Path(plan.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(plan.cache_dir) if plan.cache_dir is not None else out / "cache"
    problem = plan.problem
    base = Discretization(problem)
    runs = _enumerate_runs(plan)
    need_ref = plan.with_reference or any(s in _NUDGED for s, *_ in runs)
    ref_u = None
    if need_ref:
        ref_u, _ = compute_reference(problem, cache, disc=base)
    discs = {None: base}
    summary_runs = []
    for solver, H, seed, snr, rank in runs:
        key = _run_key(solver, H, seed, snr, rank)
        entry = {"key": key, "solver": solver, "H": H, "seed": seed, "snr": snr, "svd_rank": rank}
        try:
            if H not in discs:
                discs[H] = Discretization(problem, H, mesh=base.mesh)
            disc = discs[H]
            data = None
            if solver in _NUDGED and plan.mu > 0:
                data = extract_partial_data(ref_u, disc.space, disc.overlay)
                exact = data
                if rank:
                    pkg = svd_compress(data, rank)
                    data, err = svd_reconstruct(pkg, disc.overlay, exact)
                    entry["svd_entries"] = pkg.entries_count
                    entry["svd_error"] = err
                if snr:
                    data = add_noise(data, snr, seed, reference_max(ref_u, disc.space.n_scalar))
                entry["data_noise_norm"] = data_noise_norm(data, exact)
                write_data_csv(out / f"{key}_data.csv", data)
            cfg = SolverConfig(nu=problem.nu, mu=plan.mu if solver in _NUDGED else 0.0, gamma=plan.gamma,
                               H=H, max_iter=plan.max_iter, tol_residual=plan.tol, solver=solver,
                               switch_tol=plan.switch_tol)
            res = run_solver(disc, cfg, data, reference=ref_u if plan.with_reference else None)
            (out / f"{key}.csv").write_text(records_to_csv(res.records, plan.timing))
            rate, window = summary_rate([r.residual_Hdual for r in res.records], plan.window, plan.tol)
            last = res.records[-1] if res.records else None
            entry.update({
                "iterations": res.iterations, "converged": res.converged, "diverged": res.diverged,
                "status": res.status, "contraction_rate": rate, "rate_window": window,
                "initial_residual": res.initial_residual,
                "final_residual": None if last is None else last.residual_Hdual,
                "final_residual_plain": None if last is None else last.residual_plain,
                "final_error_L2": None if last is None else last.error_L2,
                "final_error_H1": None if last is None else last.error_H1,
                "phase_switch": res.phase_switch, "newton_failed": res.newton_failed,
                "factorizations": {k: v for k, v in sorted(res.counts.items()) if not k.startswith("norm:")},
                "csv": f"{key}.csv",
            })
        except Exception as exc:  # recorded, the experiment continues
            log.exception("run %s failed", key)
            entry.update({"converged": False, "error": f"{type(exc).__name__}: {exc}"})
        summary_runs.append(entry)
    summary_runs.sort(key=lambda e: e["key"])
    summary = {
        "problem": {"name": problem.name, "re": problem.re, "nu": problem.nu, "key": problem.key()},
        "mu": plan.mu, "gamma": plan.gamma, "tol": plan.tol, "max_iter": plan.max_iter,
        "window": plan.window, "runs": summary_runs,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "plot.gp").write_text(gnuplot_script([e["csv"] for e in summary_runs if "csv" in e]))
    return summary


# ----------------------------------------------------------------------------- verification

def _quadrature_errors(disc: Discretization, u, p, solution):
    s = disc.space
    xq = s.qpoints
    x, y = xq[..., 0], xq[..., 1]
    _, grad = s.eval_velocity(u)
    (g11, g12), (g21, g22) = solution.grad_u(x, y)
    eg = (grad[..., 0, 0] - g11) ** 2 + (grad[..., 0, 1] - g12) ** 2 + \
         (grad[..., 1, 0] - g21) ** 2 + (grad[..., 1, 1] - g22) ** 2
    h1 = float(np.sqrt(np.sum(s.qweights * eg)))
    ph = s.eval_pressure(p)
    pe = solution.p(x, y)
    diff = ph - pe
    diff = diff - np.sum(s.qweights * diff) / np.sum(s.qweights)
    l2p = float(np.sqrt(np.sum(s.qweights * diff**2)))
    uq, _ = s.eval_velocity(u)
    u1, u2 = solution.u(x, y)
    l2u = float(np.sqrt(np.sum(s.qweights * ((uq[..., 0] - u1) ** 2 + (uq[..., 1] - u2) ** 2))))
    return l2u, h1, l2p


def manufactured_convergence_study(ns=(8, 16, 32), nu: float = 1.0, exact: str = "trig",
                                   pressure_kind: str = "taylor-hood", tol: float = 1e-10,
                                   solver: str = PICARD) -> dict:
    """Errors of the discrete solution against a closed-form solution on a mesh sequence."""
    if len(ns) < 3:
        raise ValueError("need at least three mesh sizes")
    rows = []
    for n in ns:
        problem = ProblemSpec("manufactured", nu=nu, n=n, pressure_kind=pressure_kind, exact=exact)
        disc = Discretization(problem)
        res = run_solver(disc, SolverConfig(nu=nu, mu=0.0, solver=solver, tol_residual=tol, max_iter=100))
        if not res.converged:
            raise RuntimeError(f"manufactured solve failed at n={n}: {res.status}")
        l2u, h1u, l2p = _quadrature_errors(disc, res.state.u, res.state.p, problem.solution)
        rows.append({"n": n, "h": 1.0 / n, "iterations": res.iterations, "u_L2": l2u, "u_H1": h1u,
                     "p_L2": l2p})
    h = np.log([r["h"] for r in rows])
    slopes = {}
    for key in ("u_L2", "u_H1", "p_L2"):
        e = np.array([r[key] for r in rows])
        slopes[key] = float(np.polyfit(h, np.log(e), 1)[0]) if np.all(e > 0) else None
    return {"rows": rows, "slopes": slopes}


# ----------------------------------------------------------------------------- field output

def write_fields_vtk(path, disc: Discretization, u: np.ndarray, p: np.ndarray | None = None) -> None:
    """Vertex velocity (and TH pressure) of a solution as legacy VTK."""
    vel = disc.space.vertex_velocity(u)
    point_data = {"velocity": vel}
    if p is not None and disc.space.pressure_kind == "taylor-hood":
        point_data["pressure"] = p
    write_vtk(path, disc.mesh, point_data, title=f"cdaipy {disc.problem.key()}")


def gnuplot_script(csv_files, column: str = "residual_Hdual") -> str:
    """Semilog residual plot of convergence CSVs; run with ``gnuplot plot.gp``."""
    col = CSV_COLUMNS.index(column) + 1
    lines = ["set datafile separator ','", "set logscale y", "set xlabel 'iteration'",
             f"set ylabel '{column}'", "set key outside", "set terminal pngcairo size 900,600",
             "set output 'convergence.png'"]
    if not csv_files:
        return "\n".join(lines) + "\n"
    plots = [f"'{f}' every ::1 using 1:{col} with linespoints title '{Path(f).stem}'" for f in csv_files]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"
