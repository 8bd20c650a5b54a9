"""Sparse operators and load vectors for the grad-div stabilized, nudged NSE.

Sign convention: ``B[q, v] = -(div v, q)``, so the momentum equation reads
``A u + B^T p = F`` and the mass equation ``B u = 0``.

The nudging Gram matrix ``D = P^T W P`` couples every dof of a coarse cell and
is dense per coarse cell. It is kept in factored form ``D = C^T C`` with
``C = W^(1/2) P`` so linear solves never see the dense blocks.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .fespace import MixedSpace, DirichletData
from .mesh import CoarseOverlay


class _Scatter:
    """Reusable COO index pattern for local (nloc x nloc) element matrices."""

    def __init__(self, dof_map: np.ndarray, n: int, dof_map_cols: np.ndarray | None = None, n_cols: int | None = None):
        cols_map = dof_map if dof_map_cols is None else dof_map_cols
        self.rows = np.repeat(dof_map, cols_map.shape[1], axis=1).ravel()
        self.cols = np.tile(cols_map, (1, dof_map.shape[1])).ravel()
        self.shape = (n, n if n_cols is None else n_cols)

    def __call__(self, local: np.ndarray) -> sp.csr_matrix:
        A = sp.coo_matrix((local.ravel(), (self.rows, self.cols)), shape=self.shape).tocsr()
        A.sum_duplicates()
        A.sort_indices()
        return A


def _blockdiag2(A):
    return sp.block_diag((A, A), format="csr")


@dataclass(frozen=True)
class NudgingSetup:
    overlay: CoarseOverlay
    P: sp.csr_matrix        # (ncoarse, nscalar), coarse-cell means of each basis function
    W: np.ndarray           # coarse cell areas

    @cached_property
    def C_scalar(self) -> sp.csr_matrix:
        return sp.diags(np.sqrt(self.W)) @ self.P

    @cached_property
    def C(self) -> sp.csr_matrix:
        """Vector factor with D = C^T C, shape (2 ncoarse, n_u)."""
        return _blockdiag2(self.C_scalar)

    def project(self, u: np.ndarray, n_scalar: int) -> np.ndarray:
        """Coarse means of each velocity component, shape (ncoarse, 2)."""
        return np.column_stack([self.P @ u[:n_scalar], self.P @ u[n_scalar:]])


class OperatorSet:
    """Static matrices of a mixed space: assembled once, never modified."""

    def __init__(self, space: MixedSpace, overlay: CoarseOverlay | None = None):
        self.space = space
        nc = space.n_cells
        w = space.qweights
        phi = space.phi
        dphi = space.dphi
        self._scalar = _Scatter(space.dof_map_scalar, space.n_scalar)

        K = np.einsum("cq,cqid,cqjd->cij", w, dphi, dphi)
        M = np.einsum("cq,qi,qj->cij", w, phi, phi)
        self.K = self._scalar(K)
        self.M = self._scalar(M)
        self.S = _blockdiag2(self.K)
        self.Mu = _blockdiag2(self.M)

        # grad-div: local 12x12 from derivative d_c of component c
        div = dphi.transpose(0, 1, 3, 2).reshape(nc, -1, 12)  # (nc, nq, 2*6) comps blocked
        Gloc = np.einsum("cq,cqi,cqj->cij", w, div, div)
        self.G = _Scatter(space.dof_map_u, space.n_u)(Gloc)

        psi = space.psi
        Bloc = -np.einsum("cq,qi,cqj->cij", w, psi, div)
        self.B = _Scatter(space.dof_map_p, space.n_p, space.dof_map_u, space.n_u)(Bloc)
        Mploc = np.einsum("cq,qi,qj->cij", w, psi, psi)
        self.Mp = _Scatter(space.dof_map_p, space.n_p)(Mploc)

        self.pressure_weights = np.asarray(self.Mp.sum(axis=0)).ravel()  # integrals of pressure basis
        self.area = float(self.pressure_weights.sum())
        self.nudging = build_nudging(space, overlay) if overlay is not None else None

    @property
    def overlay(self):
        return None if self.nudging is None else self.nudging.overlay

    @cached_property
    def D(self) -> sp.csr_matrix:
        """Explicit nudging Gram matrix (dense per coarse cell; for checks on small meshes)."""
        if self.nudging is None:
            raise ValueError("no coarse overlay attached")
        C = self.nudging.C
        return (C.T @ C).tocsr()

    def apply_D(self, u: np.ndarray) -> np.ndarray:
        C = self.nudging.C
        return C.T @ (C @ u)

    def mean_pressure(self, p: np.ndarray) -> float:
        return float(self.pressure_weights @ p) / self.area

    def zero_mean(self, p: np.ndarray) -> np.ndarray:
        return p - self.mean_pressure(p)

    def stokes_part(self, nu: float, gamma: float) -> sp.csr_matrix:
        return (nu * self.S + gamma * self.G).tocsr()


def assemble_static(space: MixedSpace, overlay: CoarseOverlay | None = None) -> OperatorSet:
    return OperatorSet(space, overlay)


def build_nudging(space: MixedSpace, overlay: CoarseOverlay) -> NudgingSetup:
    if overlay.n_fine_cells != space.n_cells:
        raise ValueError("overlay was built for a different mesh")
    cell_int = np.einsum("cq,qi->ci", space.qweights, space.phi)  # integral of each local basis fn
    rows = np.repeat(overlay.cell_of_fine, 6)
    P = sp.coo_matrix(
        (cell_int.ravel(), (rows, space.dof_map_scalar.ravel())),
        shape=(overlay.n_coarse, space.n_scalar),
    ).tocsr()
    P.sum_duplicates()
    P = (sp.diags(1.0 / overlay.coarse_measures) @ P).tocsr()
    P.eliminate_zeros()
    return NudgingSetup(overlay, P, overlay.coarse_measures.copy())


def coarse_means(space: MixedSpace, setup: NudgingSetup, u: np.ndarray) -> np.ndarray:
    return setup.project(u, space.n_scalar)


def nudging_rhs(setup: NudgingSetup, values: np.ndarray, mu: float, overlay: CoarseOverlay | None = None) -> np.ndarray:
    """Vector r with r . v = mu (I_H u_data, I_H v); ``values`` are coarse means (ncoarse, 2)."""
    if overlay is not None and overlay is not setup.overlay:
        raise ValueError("data and nudging operator use different overlays")
    values = np.asarray(values, dtype=float)
    if values.shape != (setup.overlay.n_coarse, 2):
        raise ValueError(f"expected coarse data of shape {(setup.overlay.n_coarse, 2)}, got {values.shape}")
    wv = setup.W[:, None] * values
    return mu * np.concatenate([setup.P.T @ wv[:, 0], setup.P.T @ wv[:, 1]])


class ConvectionAssembler:
    """Skew-symmetric convection b(w, u, v) = 1/2 (w.grad u, v) - 1/2 (w.grad v, u)
    and its Newton linearization, with the sparsity pattern cached."""

    def __init__(self, space: MixedSpace):
        self.space = space
        self._scalar = _Scatter(space.dof_map_scalar, space.n_scalar)
        self._vector = _Scatter(space.dof_map_u, space.n_u)

    def convection(self, wind: np.ndarray) -> sp.csr_matrix:
        """N with v^T N u = b(wind, u, v)."""
        s = self.space
        wq, _ = s.eval_velocity(wind)
        adv = np.einsum("cqd,cqjd->cqj", wq, s.dphi)          # wind . grad phi_j
        C = np.einsum("cq,qi,cqj->cij", s.qweights, s.phi, adv)
        return _blockdiag2(self._scalar(0.5 * (C - C.transpose(0, 2, 1))))

    def linearization(self, state: np.ndarray) -> sp.csr_matrix:
        """J with v^T J d = b(d, state, v)."""
        s = self.space
        uq, gq = s.eval_velocity(state)
        w = s.qweights
        # row (a, i), col (b, j): 1/2 phi_j phi_i d_b u_a - 1/2 phi_j d_b phi_i u_a
        t1 = 0.5 * np.einsum("eq,qi,qj,eqab->eaibj", w, s.phi, s.phi, gq)
        t2 = 0.5 * np.einsum("eq,eqib,qj,eqa->eaibj", w, s.dphi, s.phi, uq)
        loc = (t1 - t2).reshape(s.n_cells, 12, 12)
        return self._vector(loc)


def assemble_convection(space: MixedSpace, wind: np.ndarray) -> sp.csr_matrix:
    return ConvectionAssembler(space).convection(wind)


def assemble_body_force(space: MixedSpace, f) -> np.ndarray:
    """Load vector <f, v> for ``f(x, y) -> (f1, f2)``; ``None`` means f = 0."""
    F = np.zeros(space.n_u)
    if f is None:
        return F
    xq = space.qpoints
    f1, f2 = f(xq[..., 0], xq[..., 1])
    for comp, fc in enumerate((f1, f2)):
        fc = np.broadcast_to(fc, xq.shape[:2])
        loc = np.einsum("cq,cq,qi->ci", space.qweights, fc, space.phi)
        np.add.at(F, comp * space.n_scalar + space.dof_map_scalar.ravel(), loc.ravel())
    return F


@dataclass
class ConstrainedSystem:
    A: sp.csr_matrix
    rhs: np.ndarray
    dirichlet: DirichletData

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        u = self.dirichlet.lift()
        u[self.dirichlet.free] = x_free
        return u


def apply_dirichlet(A: sp.spmatrix, rhs: np.ndarray, dirichlet: DirichletData) -> ConstrainedSystem:
    """Symmetric elimination: keep free rows/cols, move the lifting to the rhs."""
    A = sp.csr_matrix(A)
    f, c = dirichlet.free, dirichlet.constrained
    Aff = A[f][:, f].tocsr()
    r = rhs[f] - A[f][:, c] @ dirichlet.values
    return ConstrainedSystem(Aff, r, dirichlet)


def nse_residual(ops: OperatorSet, nu: float, gamma: float, u: np.ndarray, p: np.ndarray,
                 load: np.ndarray, N: sp.spmatrix, mu: float = 0.0, data_rhs: np.ndarray | None = None):
    """Algebraic residual of the (nudged) discrete NSE at (u, p).

    Returns the full momentum residual ``F + mu*nudging - (nu S + gamma G + mu D + N(u)) u - B^T p``
    and the mass residual ``-B u`` (zero for discretely divergence-free u).
    """
    r = load - nu * (ops.S @ u) - gamma * (ops.G @ u) - N @ u - ops.B.T @ p
    if mu:
        r = r + data_rhs - mu * ops.apply_D(u)
    return r, -(ops.B @ u)
