"""Benchmark problem catalog and their discretizations."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .assembly import ConvectionAssembler, OperatorSet, assemble_body_force
from .fespace import TAYLOR_HOOD, MixedSpace, build_dirichlet, tagged_velocity
from .linsolve import Factorization, Layout, point_boxes
from .mesh import Mesh, barycentric_refine, build_channel_with_block, build_coarse_overlay, build_unit_square

CHANNEL_L = 0.1   # block width used as length scale
CHANNEL_U = 1.0


class ManufacturedSolution:
    """u = curl(sin(pi x) sin(pi y)), p = cos(pi x) cos(pi y) on the unit square.

    The velocity is divergence free with nonzero tangential boundary values;
    the forcing is f = u.grad u + grad p - nu lap u.
    """

    def __init__(self, nu: float):
        self.nu = nu

    @staticmethod
    def u(x, y):
        pi = np.pi
        return pi * np.sin(pi * x) * np.cos(pi * y), -pi * np.cos(pi * x) * np.sin(pi * y)

    @staticmethod
    def grad_u(x, y):
        pi = np.pi
        sx, cx, sy, cy = np.sin(pi * x), np.cos(pi * x), np.sin(pi * y), np.cos(pi * y)
        return (pi**2 * cx * cy, -pi**2 * sx * sy), (pi**2 * sx * sy, -pi**2 * cx * cy)

    @staticmethod
    def p(x, y):
        return np.cos(np.pi * x) * np.cos(np.pi * y)

    def f(self, x, y):
        pi = np.pi
        sx, cx, sy, cy = np.sin(pi * x), np.cos(pi * x), np.sin(pi * y), np.cos(pi * y)
        u1, u2 = self.u(x, y)
        f1 = pi**3 * sx * cx - pi * sx * cy + 2 * pi**2 * self.nu * u1
        f2 = pi**3 * sy * cy - pi * cx * sy + 2 * pi**2 * self.nu * u2
        return f1, f2


class LinearSolution:
    """u = (x, -y), p = 0: lies in the discrete space, so it is reproduced exactly."""

    def __init__(self, nu: float):
        self.nu = nu

    @staticmethod
    def u(x, y):
        return x + 0.0 * y, -y + 0.0 * x

    @staticmethod
    def grad_u(x, y):
        one, zero = 1.0 + 0.0 * x, 0.0 * x
        return (one, zero), (zero, -one)

    @staticmethod
    def p(x, y):
        return 0.0 * x

    def f(self, x, y):
        return x + 0.0 * y, y + 0.0 * x


@dataclass
class ProblemSpec:
    """A benchmark: domain, Reynolds number convention, boundary data and forcing.

    Cavity: Re = 1/nu. Channel: Re = U L / nu with U = 1, L = 0.1.
    Manufactured: Re = 1/nu on the unit square with the exact solution's boundary data.
    """
    name: str
    re: float | None = None
    nu: float | None = None
    n: int = 64                  # square subdivisions (cavity / manufactured)
    nx: int = 88                 # channel grid
    ny: int = 41
    pressure_kind: str = TAYLOR_HOOD
    exact: str = "trig"          # manufactured variant: trig | linear

    def __post_init__(self):
        if self.name not in ("cavity", "channel", "manufactured"):
            raise ValueError(f"unknown problem {self.name!r}")
        if (self.re is None) == (self.nu is None):
            raise ValueError("give exactly one of re and nu")
        scale = CHANNEL_U * CHANNEL_L if self.name == "channel" else 1.0
        if self.re is None:
            self.re = scale / self.nu
        else:
            self.nu = scale / self.re
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")

    @cached_property
    def solution(self):
        if self.name != "manufactured":
            return None
        return (LinearSolution if self.exact == "linear" else ManufacturedSolution)(self.nu)

    def build_mesh(self) -> Mesh:
        if self.name == "channel":
            mesh = build_channel_with_block(self.nx, self.ny)
        else:
            mesh = build_unit_square(self.n)
        if self.pressure_kind != TAYLOR_HOOD:
            mesh = barycentric_refine(mesh)
        return mesh

    def boundary_value(self, tag, x, y):
        if self.name == "manufactured":
            return self.solution.u(x, y)
        return tagged_velocity(self.name, tag, x, y)

    def forcing(self):
        return None if self.solution is None else self.solution.f

    def key(self) -> str:
        if self.name == "channel":
            grid = f"nx{self.nx}-ny{self.ny}"
        else:
            grid = f"n{self.n}"
        return f"{self.name}-{grid}-{self.pressure_kind}-re{self.re:.6g}"


class Discretization:
    """Mesh, mixed space, static operators, boundary data and helper norms for one problem.

    Immutable after construction apart from lazily built caches.
    """

    def __init__(self, problem: ProblemSpec, H: float | None = None, mesh: Mesh | None = None):
        self.problem = problem
        self.mesh = mesh if mesh is not None else problem.build_mesh()
        self.space = MixedSpace(self.mesh, problem.pressure_kind)
        self.overlay = build_coarse_overlay(self.mesh, H) if H is not None else None
        self.ops = OperatorSet(self.space, self.overlay)
        self.dirichlet = build_dirichlet(self.space, problem.boundary_value)
        self.load = assemble_body_force(self.space, problem.forcing())
        self.free = self.dirichlet.free
        self.convection = ConvectionAssembler(self.space)

    @property
    def nu(self) -> float:
        return self.problem.nu

    @property
    def H(self):
        return None if self.overlay is None else self.overlay.H

    @cached_property
    def layout(self) -> Layout:
        s = self.space
        vxy = np.vstack([s.scalar_dof_coords, s.scalar_dof_coords])[self.free]
        if s.pressure_kind == TAYLOR_HOOD:
            pxy = self.mesh.vertices
        else:
            pxy = np.repeat(self.mesh.vertices[self.mesh.cells].mean(axis=1), 3, axis=0)
        coarse = None
        if self.overlay is not None:
            ov = self.overlay
            H = ov.H
            x0, y0 = self.mesh.xlines[0], self.mesh.ylines[0]
            lo = np.column_stack([x0 + ov.coarse_ij[:, 0] * H, y0 + ov.coarse_ij[:, 1] * H])
            hi = np.minimum(lo + H, [self.mesh.xlines[-1], self.mesh.ylines[-1]])
            eps = 1e-9 * H
            box = np.column_stack([lo[:, 0] + eps, hi[:, 0] - eps, lo[:, 1] + eps, hi[:, 1] - eps])
            coarse = np.vstack([box, box])
        return Layout(self.mesh.xlines, self.mesh.ylines, point_boxes(vxy), point_boxes(pxy), coarse)

    @cached_property
    def B_free(self):
        return self.ops.B[:, self.free].tocsr()

    @cached_property
    def C_free(self):
        return self.ops.nudging.C[:, self.free].tocsr()

    @cached_property
    def _stiffness_free(self) -> Factorization:
        ns = self.space.n_scalar
        fs = self.free[self.free < ns]
        K = self.ops.K[fs][:, fs]
        return Factorization(K, label="norm:stiffness")

    @cached_property
    def _pressure_mass(self) -> Factorization:
        return Factorization(self.ops.Mp, label="norm:pressure-mass")

    def pressure_mass_solve(self, r):
        return self._pressure_mass.solve(r)

    def dual_norm(self, r_full: np.ndarray) -> float:
        """H^{-1} dual norm sqrt(r^T S^{-1} r) of a momentum residual over free dofs."""
        ns = self.space.n_scalar
        fs = self.free[self.free < ns]
        total = 0.0
        for comp in range(2):
            rc = r_full[comp * ns + fs]
            total += float(rc @ self._stiffness_free.solve(rc))
        return float(np.sqrt(max(total, 0.0)))

    def mass_residual_norm(self, d: np.ndarray) -> float:
        return float(np.sqrt(max(float(d @ self._pressure_mass.solve(d)), 0.0)))

    def l2(self, e: np.ndarray) -> float:
        return float(np.sqrt(max(e @ (self.ops.Mu @ e), 0.0)))

    def h1(self, e: np.ndarray) -> float:
        """H^1 seminorm ||grad e||."""
        return float(np.sqrt(max(e @ (self.ops.S @ e), 0.0)))

    def div_norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(max(u @ (self.ops.G @ u), 0.0)))

    def initial_state(self):
        return self.dirichlet.lift(), np.zeros(self.space.n_p)

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        u = self.dirichlet.lift()
        u[self.free] = u_free
        return u


def discretize(problem: ProblemSpec, H: float | None = None) -> Discretization:
    return Discretization(problem, H)
