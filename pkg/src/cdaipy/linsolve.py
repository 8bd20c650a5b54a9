"""Sparse direct and Krylov linear algebra for the velocity, Stokes and saddle systems.

Factorizations use SuperLU with a geometric nested-dissection ordering: the
meshes are tensor grids, so grid lines are exact graph separators. Every
unknown carries a bounding box (a point for FE dofs, the coarse cell for
nudging unknowns, the whole domain for the mean-pressure multiplier).
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

# process-wide instrumentation: how many factorizations / Schur operators were built, per label
counters: Counter = Counter()


class LinearSolveError(RuntimeError):
    pass


class CGError(LinearSolveError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


def nested_dissection(boxes: np.ndarray, xlines: np.ndarray, ylines: np.ndarray, leaf: int = 48) -> np.ndarray:
    """Fill-reducing ordering from unknown bounding boxes (n, 4) = (xmin, xmax, ymin, ymax).

    Regions are split on their middle grid line; unknowns touching the line go
    to the separator, which is numbered after both halves.
    """
    tol = 1e-12
    out = []
    stack = [(np.arange(len(boxes)), np.asarray(xlines), np.asarray(ylines), False)]
    # iterative post-order: (idx, xl, yl, emit) with emit=True meaning "append idx as is"
    while stack:
        idx, xl, yl, emit = stack.pop()
        if emit or len(idx) <= leaf or (len(xl) <= 2 and len(yl) <= 2):
            out.append(idx)
            continue
        if len(xl) >= len(yl):
            k = len(xl) // 2
            c = xl[k]
            lo, hi = boxes[idx, 0], boxes[idx, 1]
            halves = (xl[:k + 1], yl), (xl[k:], yl)
        else:
            k = len(yl) // 2
            c = yl[k]
            lo, hi = boxes[idx, 2], boxes[idx, 3]
            halves = (xl, yl[:k + 1]), (xl, yl[k:])
        left = idx[hi < c - tol]
        right = idx[lo > c + tol]
        sep = idx[(hi >= c - tol) & (lo <= c + tol)]
        # pushed in reverse: left, right, then separator
        stack.append((sep, None, None, True))
        stack.append((right, *halves[1], False))
        stack.append((left, *halves[0], False))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def point_boxes(xy: np.ndarray) -> np.ndarray:
    return np.column_stack([xy[:, 0], xy[:, 0], xy[:, 1], xy[:, 1]])


class Factorization:
    """Sparse LU of a square matrix, with optional symmetric pre-permutation."""

    def __init__(self, A: sp.spmatrix, perm: np.ndarray | None = None, label: str = "matrix",
                 pivot_thresh: float = 0.01):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise LinearSolveError(f"{label}: matrix is not square {A.shape}")
        self.shape = A.shape
        self.label = label
        self.A = A
        self.perm = perm
        empty = np.flatnonzero(np.diff(sp.csr_matrix(A).indptr) == 0)
        if len(empty):
            raise LinearSolveError(f"{label}: singular, row {empty[0]} is empty (pivot {empty[0]})")
        Ap = A if perm is None else A[perm][:, perm].tocsc()
        try:
            if perm is None:
                self.lu = spla.splu(Ap, permc_spec="COLAMD")
            else:
                self.lu = spla.splu(Ap, permc_spec="NATURAL", diag_pivot_thresh=pivot_thresh,
                                    options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise LinearSolveError(f"{label}: {exc}") from exc
        counters[label] += 1

    @property
    def fill(self) -> int:
        return self.lu.L.nnz + self.lu.U.nnz

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.perm is None:
            x = self.lu.solve(b)
        else:
            xp = self.lu.solve(b[self.perm])
            x = np.empty_like(xp)
            x[self.perm] = xp
        if not np.all(np.isfinite(x)):
            raise LinearSolveError(f"{self.label}: non-finite solution (numerically singular)")
        return x

    def backward_error(self, x: np.ndarray, b: np.ndarray) -> float:
        r = self.A @ x - b
        normA = spla.norm(self.A, np.inf)
        return float(np.linalg.norm(r, np.inf) / (normA * np.linalg.norm(x, np.inf) + np.linalg.norm(b, np.inf)))


def factorize(A, perm=None, label="matrix") -> Factorization:
    return Factorization(A, perm, label)


@dataclass
class Layout:
    """Geometry of the unknowns of one family of systems, used to order them."""
    xlines: np.ndarray
    ylines: np.ndarray
    velocity_boxes: np.ndarray                 # free velocity dofs
    pressure_boxes: np.ndarray | None = None
    coarse_boxes: np.ndarray | None = None     # one per nudging row of C (2 per coarse cell)
    _cache: dict = field(default_factory=dict)

    def ordering(self, with_coarse: bool, with_pressure: bool) -> np.ndarray:
        key = (with_coarse, with_pressure)
        if key not in self._cache:
            parts = [self.velocity_boxes]
            if with_coarse:
                parts.append(self.coarse_boxes)
            if with_pressure:
                parts.append(self.pressure_boxes)
                x0, x1, y0, y1 = self.xlines[0], self.xlines[-1], self.ylines[0], self.ylines[-1]
                parts.append(np.array([[x0, x1, y0, y1]]))
            self._cache[key] = nested_dissection(np.vstack(parts), self.xlines, self.ylines)
        return self._cache[key]


class VelocitySolver:
    """Solves (A + mu C^T C) x = b for the free velocity dofs.

    With mu > 0 the nudging Gram matrix enters through the sparse augmented
    system [[A, C^T], [C, -I/mu]] instead of being formed explicitly.
    """

    def __init__(self, A, C=None, mu: float = 0.0, layout: Layout | None = None, label: str = "velocity"):
        n = A.shape[0]
        self.n = n
        if mu:
            m = C.shape[0]
            K = sp.bmat([[A, C.T], [C, -sp.identity(m) / mu]], format="csc")
        else:
            K = A
        perm = layout.ordering(bool(mu), False) if layout is not None else None
        self.fact = Factorization(K, perm, label)

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.fact.shape[0] == self.n:
            return self.fact.solve(b)
        rhs = np.zeros(self.fact.shape[0])
        rhs[:self.n] = b
        return self.fact.solve(rhs)[:self.n]


class SchurOperator(spla.LinearOperator):
    """Matrix-free p -> B Atilde^{-1} B^T p on the free velocity dofs."""

    def __init__(self, B_free: sp.spmatrix, atilde: VelocitySolver, label: str = "schur"):
        self.B = sp.csr_matrix(B_free)
        self.BT = self.B.T.tocsr()
        self.atilde = atilde
        n = self.B.shape[0]
        super().__init__(dtype=float, shape=(n, n))
        counters[label] += 1

    def _matvec(self, p):
        return self.B @ self.atilde.solve(self.BT @ np.ravel(p))

    def velocity(self, delta: np.ndarray) -> np.ndarray:
        """-Atilde^{-1} B^T delta."""
        return -self.atilde.solve(self.BT @ delta)


@dataclass(frozen=True)
class KrylovConfig:
    rtol: float = 1e-10
    atol: float = 1e-14
    max_iter: int = 500

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("Krylov tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    history: list          # residual 2-norms, starting with the initial one
    precond_history: list  # sqrt(r^T M^{-1} r)


def cg(op, rhs: np.ndarray, precond=None, config: KrylovConfig = KrylovConfig(),
       mean_weights: np.ndarray | None = None) -> CGResult:
    """Preconditioned conjugate gradients from a zero initial guess.

    Stops when ||r|| <= max(rtol ||b||, atol). If ``mean_weights`` is given the
    returned solution has zero weighted mean (constant null space removed).
    """
    apply = op.matvec if hasattr(op, "matvec") else (lambda v: op @ v)
    prec = (lambda r: r) if precond is None else precond
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    target = max(config.rtol * bnorm, config.atol)
    hist = [float(bnorm)]
    if bnorm <= target:
        return CGResult(x, 0, hist, [float(bnorm)])
    z = prec(r)
    rz = float(r @ z)
    phist = [float(np.sqrt(max(rz, 0.0)))]
    d = z.copy()
    for it in range(1, config.max_iter + 1):
        Ad = apply(d)
        dAd = float(d @ Ad)
        if dAd <= 0:
            raise CGError(f"CG breakdown: non-positive curvature {dAd:.3e} at iteration {it}", hist)
        alpha = rz / dAd
        x += alpha * d
        r -= alpha * Ad
        rn = float(np.linalg.norm(r))
        hist.append(rn)
        z = prec(r)
        rz_new = float(r @ z)
        phist.append(float(np.sqrt(max(rz_new, 0.0))))
        if rn <= target:
            if mean_weights is not None:
                x = x - (mean_weights @ x) / mean_weights.sum()
            return CGResult(x, it, hist, phist)
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise CGError(
        f"CG did not converge in {config.max_iter} iterations: residual {hist[-1]:.3e} > {target:.3e}", hist
    )


def stokes_step_solve(schur: SchurOperator, rhs_mass: np.ndarray, mp_solver, config: KrylovConfig,
                      mean_weights: np.ndarray | None = None):
    """Solve [[Atilde, B^T], [B, 0]] [w; delta] = [0; rhs_mass] by Schur-complement CG.

    Eliminating w = -Atilde^{-1} B^T delta gives (B Atilde^{-1} B^T) delta = -rhs_mass.
    Returns (w on free velocity dofs, delta, CG result).
    """
    res = cg(schur, -rhs_mass, precond=mp_solver, config=config, mean_weights=mean_weights)
    delta = res.x
    return schur.velocity(delta), delta, res


class SaddleSolver:
    """Direct solve of [[A + mu C^T C, B^T], [B, 0]] with a zero-mean pressure constraint.

    The mean constraint is a bordering multiplier row ``m^T p = 0``; with a
    compatible right-hand side its multiplier is zero, so this equals solving
    the singular system and subtracting the pressure mean afterwards.
    """

    def __init__(self, A, B, mean_weights, C=None, mu: float = 0.0, layout: Layout | None = None,
                 label: str = "saddle"):
        nu_, npr = A.shape[0], B.shape[0]
        m = sp.csr_matrix(np.asarray(mean_weights)[None, :])
        if mu:
            nc = C.shape[0]
            K = sp.bmat([
                [A, C.T, B.T, None],
                [C, -sp.identity(nc) / mu, None, None],
                [B, None, None, m.T],
                [None, None, m, None],
            ], format="csc")
            self._slices = (nu_, nc, npr)
        else:
            K = sp.bmat([[A, B.T, None], [B, None, m.T], [None, m, None]], format="csc")
            self._slices = (nu_, 0, npr)
        perm = layout.ordering(bool(mu), True) if layout is not None else None
        self.fact = Factorization(K, perm, label)

    def solve(self, rhs_u: np.ndarray, rhs_p: np.ndarray):
        nu_, nc, npr = self._slices
        rhs = np.zeros(self.fact.shape[0])
        rhs[:nu_] = rhs_u
        rhs[nu_ + nc:nu_ + nc + npr] = rhs_p
        x = self.fact.solve(rhs)
        return x[:nu_], x[nu_ + nc:nu_ + nc + npr]


def coupled_saddle_solve(A, B, rhs_u, rhs_p, mean_weights, C=None, mu=0.0, layout=None, label="saddle"):
    return SaddleSolver(A, B, mean_weights, C, mu, layout, label).solve(rhs_u, rhs_p)


def export_matrix_market(path, A, comment: str = "") -> None:
    """Write a sparse matrix in Matrix Market coordinate format (offline debugging)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment)


def import_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(str(path)))
