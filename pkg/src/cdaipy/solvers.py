"""Nonlinear iterations: Picard, IPY (incremental Picard-Yosida), their nudged
(CDA) variants, Newton and the CDA-IPY -> Newton hybrid.

Residuals are measured in the H^1_0-dual norm of the momentum residual over the
free velocity dofs, plus the Mp^{-1} norm of the mass residual. A run stops when
both are below ``tol_residual``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import linsolve
from .assembly import nudging_rhs
from .linsolve import (KrylovConfig, LinearSolveError, SaddleSolver, SchurOperator, VelocitySolver,
                       stokes_step_solve)

log = logging.getLogger(__name__)

PICARD = "picard"
CDA_PICARD = "cda-picard"
IPY = "ipy"
CDA_IPY = "cda-ipy"
NEWTON = "newton"
HYBRID = "hybrid"
SOLVER_KINDS = (PICARD, CDA_PICARD, IPY, CDA_IPY, NEWTON, HYBRID)
_NUDGED = (CDA_PICARD, CDA_IPY, HYBRID)


class StepError(RuntimeError):
    """A linear solve inside one algorithm step failed; ``step`` names it (k.1, k.2, k.3, ...)."""

    def __init__(self, step: str, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class SolverConfig:
    nu: float
    mu: float = 1.0
    gamma: float = 1.0
    H: Optional[float] = None
    max_iter: int = 100
    tol_residual: float = 1e-8
    switch_tol: float = 1e-2
    solver: str = CDA_IPY
    krylov: KrylovConfig = field(default_factory=KrylovConfig)
    divergence_factor: float = 1e6
    newton_growth: float = 10.0
    newton_max_iter: int = 10

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if self.mu < 0 or self.gamma < 0:
            raise ValueError("mu and gamma must be non-negative")
        if self.solver not in SOLVER_KINDS:
            raise ValueError(f"unknown solver {self.solver!r}; choose from {', '.join(SOLVER_KINDS)}")
        if self.mu > 0 and self.solver in _NUDGED and self.H is None:
            raise ValueError("mu > 0 needs a coarse size H (an overlay for the data)")
        if self.max_iter < 1 or self.newton_max_iter < 1:
            raise ValueError("iteration limits must be at least 1")
        if not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if not self.switch_tol > self.tol_residual:
            raise ValueError("switch_tol must exceed tol_residual")

    @property
    def nudged(self) -> bool:
        return self.solver in _NUDGED and self.mu > 0

    @property
    def effective_mu(self) -> float:
        return self.mu if self.nudged else 0.0


@dataclass
class IterationState:
    u: np.ndarray
    p: np.ndarray
    k: int = 0


@dataclass
class IterationRecord:
    k: int
    residual_Hdual: float
    residual_plain: float
    residual_div: float
    div_norm: float
    phase: str
    wall_ms: float
    linear_iterations: int = 0
    error_L2: Optional[float] = None
    error_H1: Optional[float] = None
    k2_identity: Optional[float] = None     # max |(div(w_k + z_k), q)| for IPY steps
    increment: Optional[float] = None       # ||grad(u_k - u_{k-1})||


@dataclass
class SolveResult:
    records: list
    state: IterationState
    converged: bool
    diverged: bool
    status: str
    initial_residual: float
    counts: dict
    phase_switch: Optional[int] = None      # hybrid: last CDA-IPY iteration before Newton
    newton_failed: bool = False

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_residual(self) -> float:
        return self.records[-1].residual_Hdual if self.records else self.initial_residual


@dataclass(frozen=True)
class TheoryEstimates:
    """Constants of the convergence theory, from user-supplied estimates.

    Informational only: C1, beta and M are not computable exactly.
    """
    nu: float
    mu: float
    H: float
    f_dual_norm: float
    M: float = 1.0
    C1: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if min(self.nu, self.H, self.C1, self.beta) <= 0 or self.mu < 0 or self.M < 0:
            raise ValueError("theory constants must be positive")

    @property
    def alpha(self) -> float:
        return self.M * self.f_dual_norm / self.nu**2

    @property
    def lam(self) -> float:
        return min(self.mu, self.nu / (2 * self.C1**2 * self.H**2))

    @property
    def R(self) -> float:
        c = np.sqrt(2.0) * self.C1 / self.beta**2
        return 204 * c / self.nu + 24 * c / np.sqrt(self.nu) + 204 * c

    @property
    def contraction_squared(self) -> float:
        return self.alpha**2 * self.H * self.R

    @property
    def rate(self) -> float:
        return float(np.sqrt(self.contraction_squared))

    @property
    def mu_lower_bound(self) -> float:
        return self.nu / (2 * self.C1**2 * self.H**2)

    def as_dict(self) -> dict:
        return {"estimate": True, "alpha": self.alpha, "lambda": self.lam, "R": self.R,
                "alpha2_H_R": self.contraction_squared, "rate": self.rate,
                "mu_lower_bound": self.mu_lower_bound}


def geometric_bound(a0: float, r: float, B: float, m: int) -> float:
    """Bound on a_{m+1} for r a_{k+1} <= a_k + B: a0 r^{-(m+1)} + B/(r-1)."""
    if not r > 1:
        raise ValueError("r must exceed 1")
    if B < 0:
        raise ValueError("B must be non-negative")
    return a0 * (1.0 / r) ** (m + 1) + B / (r - 1)


def contraction_rate(records, window: int = 10, tol: float = 1e-8, key: str = "residual_Hdual") -> float:
    """Geometric-mean ratio of successive residuals over the trailing ``window``.

    Entries below 100*tol (stagnation at round-off) are excluded first.
    ``records`` may be IterationRecords or plain numbers.
    """
    vals = [float(getattr(r, key)) if not isinstance(r, (int, float, np.floating)) else float(r) for r in records]
    vals = [v for v in vals if v >= 100 * tol]
    if window < 1 or len(vals) < window + 1:
        raise ValueError(f"need at least {window + 1} residuals above {100 * tol:g}, have {len(vals)}")
    if min(vals[-window - 1:]) <= 0:
        raise ValueError("residuals must be positive")
    return float(np.exp((np.log(vals[-1]) - np.log(vals[-1 - window])) / window))


class _Engine:
    """Per-run cache of everything the step functions share."""

    def __init__(self, disc, config: SolverConfig, data=None):
        self.disc = disc
        self.config = config
        ops = disc.ops
        self.ops = ops
        self.mu = config.effective_mu
        if self.mu > 0:
            if data is None or disc.overlay is None:
                raise ValueError("nudged solver with mu > 0 needs partial data and an overlay")
            _check_overlay(disc.overlay, data.overlay)
            self.data_rhs = nudging_rhs(ops.nudging, data.values, self.mu)
        else:
            self.data_rhs = np.zeros(disc.space.n_u)
        self.free = disc.free
        self.g = disc.dirichlet.lift()
        self.stokes = ops.stokes_part(config.nu, config.gamma)
        self.stokes_ff = self.stokes[self.free][:, self.free].tocsr()
        # F + mu nudging - (nu S + gamma G + mu D) g, the part of the rhs fixed during a run
        base = disc.load + self.data_rhs - self.stokes @ self.g
        if self.mu > 0:
            base = base - self.mu * ops.apply_D(self.g)
        self.base = base
        self.C = disc.C_free if self.mu > 0 else None
        self.Bg = ops.B @ self.g
        self._atilde = None
        self._schur = None

    @property
    def schur(self) -> SchurOperator:
        if self._schur is None:
            self._atilde = VelocitySolver(self.stokes_ff, self.C, self.mu, self.disc.layout, label="atilde")
            self._schur = SchurOperator(self.disc.B_free, self._atilde, label="schur")
        return self._schur

    def convection(self, u):
        return self.disc.convection.convection(u)

    def velocity_solver(self, A_ff, label):
        return VelocitySolver(A_ff, self.C, self.mu, self.disc.layout, label=label)

    def residuals(self, u, p, N):
        """(CDA-system dual norm, plain dual norm, mass residual norm)."""
        ops = self.ops
        r = self.disc.load - self.stokes @ u - N @ u - ops.B.T @ p
        plain = self.disc.dual_norm(r)
        if self.mu > 0:
            r = r + self.data_rhs - self.mu * ops.apply_D(u)
            full = self.disc.dual_norm(r)
        else:
            full = plain
        div = self.disc.mass_residual_norm(-(ops.B @ u))
        return full, plain, div


def _check_overlay(a, b):
    if a is b:
        return
    if a.H != b.H or a.n_coarse != b.n_coarse or not np.array_equal(a.coarse_ij, b.coarse_ij):
        raise ValueError("partial data was observed on a different coarse overlay")


def picard_step(engine: _Engine, state: IterationState, N) -> tuple[IterationState, dict]:
    """One (CDA-)Picard step: coupled solve with the convection frozen at u_{k-1}."""
    free = engine.free
    A_ff = (engine.stokes_ff + N[free][:, free]).tocsr()
    rhs_u = (engine.base - N @ engine.g)[free]
    try:
        solver = SaddleSolver(A_ff, engine.disc.B_free, engine.ops.pressure_weights, engine.C, engine.mu,
                              engine.disc.layout, label="saddle")
        uf, p = solver.solve(rhs_u, -engine.Bg)
    except LinearSolveError as exc:
        raise StepError("picard", exc) from exc
    u = engine.g.copy()
    u[free] = uf
    return IterationState(u, engine.ops.zero_mean(p), state.k + 1), {}


def ipy_step(engine: _Engine, state: IterationState, N) -> tuple[IterationState, dict]:
    """One (CDA-)IPY step in three stages.

    k.1  A_k z = F + mu nudging - B^T p_{k-1}        (z carries the boundary data)
    k.2  [[Atilde, B^T], [B, 0]] (w, delta) = (0, -B z) by Schur CG
    k.3  p_k = p_{k-1} + delta;  A_k u_k = F + mu nudging - B^T p_k
    """
    free = engine.free
    BT = engine.ops.B.T
    rhs0 = engine.base - N @ engine.g
    try:
        A_k = engine.velocity_solver((engine.stokes_ff + N[free][:, free]).tocsr(), "A_k")
        zf = A_k.solve((rhs0 - BT @ state.p)[free])
    except LinearSolveError as exc:
        raise StepError("k.1", exc) from exc
    z = engine.g.copy()
    z[free] = zf
    Bz = engine.ops.B @ z
    try:
        w, delta, cgres = stokes_step_solve(engine.schur, -Bz, engine.disc.pressure_mass_solve,
                                            engine.config.krylov, engine.ops.pressure_weights)
    except LinearSolveError as exc:
        raise StepError("k.2", exc) from exc
    k2 = float(np.max(np.abs(engine.disc.B_free @ w + Bz))) if len(Bz) else 0.0
    p = state.p + delta
    try:
        uf = A_k.solve((rhs0 - BT @ p)[free])
    except LinearSolveError as exc:
        raise StepError("k.3", exc) from exc
    u = engine.g.copy()
    u[free] = uf
    info = {"linear_iterations": cgres.iterations, "k2_identity": k2,
            "k2_scale": float(np.linalg.norm(z)), "delta": delta}
    return IterationState(u, p, state.k + 1), info


def newton_step(engine: _Engine, state: IterationState, N) -> tuple[IterationState, dict]:
    """One Newton step (never nudged): (nu S + gamma G + N(u) + J(u)) u_new + B^T p = F + N(u) u."""
    if engine.mu:
        raise ValueError("Newton steps are not nudged; build the engine with mu = 0")
    free = engine.free
    J = engine.disc.convection.linearization(state.u)
    K = (N + J).tocsr()
    A_ff = (engine.stokes_ff + K[free][:, free]).tocsr()
    rhs_u = (engine.base + N @ state.u - K @ engine.g)[free]
    try:
        solver = SaddleSolver(A_ff, engine.disc.B_free, engine.ops.pressure_weights, None, 0.0,
                              engine.disc.layout, label="jacobian")
        uf, p = solver.solve(rhs_u, -engine.Bg)
    except LinearSolveError as exc:
        raise StepError("newton", exc) from exc
    u = engine.g.copy()
    u[free] = uf
    return IterationState(u, engine.ops.zero_mean(p), state.k + 1), {}


_STEPS = {PICARD: picard_step, CDA_PICARD: picard_step, IPY: ipy_step, CDA_IPY: ipy_step, NEWTON: newton_step}


def _record(engine, state, prev_u, N, phase, t0, info, reference):
    full, plain, div = engine.residuals(state.u, state.p, N)
    disc = engine.disc
    rec = IterationRecord(
        k=state.k, residual_Hdual=full, residual_plain=plain, residual_div=div,
        div_norm=disc.div_norm(state.u), phase=phase,
        wall_ms=max((time.perf_counter() - t0) * 1e3, 1e-6),
        linear_iterations=int(info.get("linear_iterations", 0)),
        k2_identity=info.get("k2_identity"),
        increment=disc.h1(state.u - prev_u),
    )
    if reference is not None:
        rec.error_L2 = disc.l2(state.u - reference)
        rec.error_H1 = disc.h1(state.u - reference)
    return rec


def _counts_since(before) -> dict:
    now = linsolve.counters
    return {k: now[k] - before.get(k, 0) for k in now if now[k] - before.get(k, 0)}


def _iterate(engine, state, N, kind, phase, max_iter, tol, records, reference, growth_ref, growth_factor):
    """Shared loop. Returns (state, N, converged, diverged, status)."""
    step = _STEPS[kind]
    for _ in range(max_iter):
        t0 = time.perf_counter()
        prev = state.u
        try:
            new_state, info = step(engine, state, N)
        except StepError as exc:
            if kind == NEWTON:
                return state, N, False, True, f"singular Jacobian: {exc}"
            raise
        N_new = engine.convection(new_state.u)
        rec = _record(engine, new_state, prev, N_new, phase, t0, info, reference)
        records.append(rec)
        state, N = new_state, N_new
        res = max(rec.residual_Hdual, rec.residual_div)
        log.debug("%s k=%d res=%.3e plain=%.3e div=%.3e", phase, state.k, rec.residual_Hdual,
                  rec.residual_plain, rec.residual_div)
        if not np.isfinite(res) or res > growth_factor * growth_ref:
            return state, N, False, True, f"diverged at k={state.k} (residual {res:.3e})"
        if res <= tol:
            return state, N, True, False, f"converged at k={state.k}"
    return state, N, False, False, f"not converged in {max_iter} iterations"


def run_solver(disc, config: SolverConfig, data=None, reference=None,
               u0: np.ndarray | None = None, p0: np.ndarray | None = None) -> SolveResult:
    """Iterate ``config.solver`` from u0 (default: lifted zero) until both residuals <= tol."""
    if config.solver == HYBRID:
        return hybrid_drive(disc, config, data, reference=reference, u0=u0, p0=p0)
    before = dict(linsolve.counters)
    engine = _Engine(disc, config, data)
    g, pz = disc.initial_state()
    state = IterationState(g if u0 is None else np.asarray(u0, float).copy(),
                           pz if p0 is None else np.asarray(p0, float).copy())
    N = engine.convection(state.u)
    r0, _, d0 = engine.residuals(state.u, state.p, N)
    init = max(r0, d0)
    records: list = []
    factor = config.newton_growth if config.solver == NEWTON else config.divergence_factor
    state, N, conv, div, status = _iterate(engine, state, N, config.solver, config.solver, config.max_iter,
                                           config.tol_residual, records, reference, init, factor)
    return SolveResult(records, state, conv, div, status, init, _counts_since(before))


def hybrid_drive(disc, config: SolverConfig, data, reference=None, u0=None, p0=None) -> SolveResult:
    """CDA-IPY until the plain residual drops below ``switch_tol``, then Newton without nudging."""
    before = dict(linsolve.counters)
    cda = replace(config, solver=CDA_IPY)
    engine = _Engine(disc, cda, data)
    g, pz = disc.initial_state()
    state = IterationState(g if u0 is None else np.asarray(u0, float).copy(),
                           pz if p0 is None else np.asarray(p0, float).copy())
    N = engine.convection(state.u)
    r0, _, d0 = engine.residuals(state.u, state.p, N)
    init = max(r0, d0)
    records: list = []
    step = ipy_step
    switched = None
    diverged = False
    for _ in range(config.max_iter):
        t0 = time.perf_counter()
        prev = state.u
        state, info = step(engine, state, N)
        N = engine.convection(state.u)
        rec = _record(engine, state, prev, N, CDA_IPY, t0, info, reference)
        records.append(rec)
        if not np.isfinite(rec.residual_Hdual) or rec.residual_Hdual > config.divergence_factor * init:
            diverged = True
            break
        if rec.residual_plain < config.switch_tol:
            switched = state.k
            break
    if switched is None:
        status = "diverged in the CDA-IPY phase" if diverged else \
            f"plain residual never fell below {config.switch_tol:g}; Newton phase not reached"
        return SolveResult(records, state, False, diverged, status, init, _counts_since(before),
                           None, newton_failed=True)

    newton = _Engine(disc, replace(config, solver=NEWTON, mu=0.0), None)
    start = records[-1].residual_plain
    N = newton.convection(state.u)
    state, N, conv, div, status = _iterate(newton, state, N, NEWTON, NEWTON, config.newton_max_iter,
                                           config.tol_residual, records, reference, start,
                                           config.newton_growth)
    if not conv:
        status = "Newton phase failed: " + status
    return SolveResult(records, state, conv, div, status, init, _counts_since(before), switched,
                       newton_failed=not conv)
