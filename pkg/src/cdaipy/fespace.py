"""Mixed P2/P1 finite element spaces on triangles.

Scalar P2 dofs are numbered vertices first (mesh order), then edges (sorted
vertex pairs, lexicographic). Velocity dofs are blocked by component:
``[u1 dofs, u2 dofs]``. Taylor-Hood pressure dofs are the mesh vertices;
Scott-Vogelius pressure dofs are three per cell, numbered cell by cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import CHANNEL_HEIGHT, CHANNEL_LENGTH, Mesh

TAYLOR_HOOD = "taylor-hood"
SCOTT_VOGELIUS = "scott-vogelius"

# corner dofs take the value of the first tag in this order
TAG_PRECEDENCE = ("wall", "obstacle", "inflow", "outflow", "lid")


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,), sum 1/2
    degree: int


def triangle_rule(degree: int = 6) -> QuadratureRule:
    """Collapsed Gauss rule on the reference triangle, exact to ``degree``."""
    n = degree // 2 + 1
    s, wj = roots_jacobi(n, 1.0, 0.0)
    t, wl = roots_legendre(n)
    x = (1 + s) / 2
    t = (1 + t) / 2
    X, T = np.meshgrid(x, t, indexing="ij")
    W = np.outer(wj / 4, wl / 2)
    pts = np.column_stack([X.ravel(), ((1 - X) * T).ravel()])
    return QuadratureRule(pts, W.ravel(), degree)


def p1_values(pts):
    x, y = pts[:, 0], pts[:, 1]
    return np.column_stack([1 - x - y, x, y])


def p1_grads():
    return np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p2_values(pts):
    l0, l1, l2 = p1_values(pts).T
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1,
    ])


def p2_grads(pts):
    lam = p1_values(pts)
    g = p1_grads()
    out = np.empty((len(pts), 6, 2))
    for i in range(3):
        out[:, i] = (4 * lam[:, i] - 1)[:, None] * g[i]
    for k, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
        out[:, 3 + k] = 4 * (lam[:, a][:, None] * g[b] + lam[:, b][:, None] * g[a])
    return out


class MixedSpace:
    """Vector P2 velocity with continuous (Taylor-Hood) or discontinuous
    (Scott-Vogelius) P1 pressure on a fixed mesh."""

    def __init__(self, mesh: Mesh, pressure_kind: str = TAYLOR_HOOD, quadrature_degree: int = 6):
        if pressure_kind not in (TAYLOR_HOOD, SCOTT_VOGELIUS):
            raise ValueError(f"unknown pressure kind {pressure_kind!r}")
        if pressure_kind == SCOTT_VOGELIUS and not mesh.barycentric:
            raise ValueError("Scott-Vogelius elements need a barycentric-refined mesh (inf-sup fails otherwise)")
        self.mesh = mesh
        self.pressure_kind = pressure_kind
        self.velocity_degree = 2
        self.quad = triangle_rule(quadrature_degree)

        edges, cell_edges = mesh.edges()
        self.edges = edges
        self.cell_edges = cell_edges
        nv = mesh.n_vertices
        self.n_scalar = nv + len(edges)
        self.dof_map_scalar = np.hstack([mesh.cells, nv + cell_edges])
        self.dof_map_u = np.hstack([self.dof_map_scalar, self.n_scalar + self.dof_map_scalar])
        self.n_u = 2 * self.n_scalar
        if pressure_kind == TAYLOR_HOOD:
            self.dof_map_p = mesh.cells.copy()
            self.n_p = nv
        else:
            self.dof_map_p = np.arange(3 * mesh.n_cells).reshape(-1, 3)
            self.n_p = 3 * mesh.n_cells

    @property
    def n_cells(self) -> int:
        return self.mesh.n_cells

    @cached_property
    def scalar_dof_coords(self) -> np.ndarray:
        v = self.mesh.vertices
        return np.vstack([v, v[self.edges].mean(axis=1)])

    # -- geometry at quadrature points -------------------------------------
    @cached_property
    def _jacobians(self):
        v = self.mesh.vertices[self.mesh.cells]
        J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        return J, det, np.linalg.inv(J)

    @property
    def detJ(self) -> np.ndarray:
        return self._jacobians[1]

    @cached_property
    def qweights(self) -> np.ndarray:
        """Physical quadrature weights, shape (nc, nq)."""
        return np.abs(self.detJ)[:, None] * self.quad.weights[None, :]

    @cached_property
    def qpoints(self) -> np.ndarray:
        v = self.mesh.vertices[self.mesh.cells]
        lam = p1_values(self.quad.points)
        return np.einsum("qk,ckd->cqd", lam, v)

    @cached_property
    def phi(self) -> np.ndarray:
        """P2 values at reference quadrature points, (nq, 6)."""
        return p2_values(self.quad.points)

    @cached_property
    def dphi(self) -> np.ndarray:
        """Physical P2 gradients, (nc, nq, 6, 2)."""
        ref = p2_grads(self.quad.points)
        return np.einsum("qid,cde->cqie", ref, self._jacobians[2])

    @cached_property
    def psi(self) -> np.ndarray:
        """P1 pressure values at reference quadrature points, (nq, 3)."""
        return p1_values(self.quad.points)

    # -- field helpers -------------------------------------------------------
    def eval_velocity(self, u: np.ndarray):
        """Velocity and its gradient at quadrature points: (nc, nq, 2) and (nc, nq, 2, 2)
        with grad[..., a, b] = d u_a / d x_b."""
        loc = u[self.dof_map_u].reshape(self.n_cells, 2, 6)
        val = np.einsum("qi,cai->cqa", self.phi, loc)
        grad = np.einsum("cqib,cai->cqab", self.dphi, loc)
        return val, grad

    def eval_pressure(self, p: np.ndarray) -> np.ndarray:
        return np.einsum("qi,ci->cq", self.psi, p[self.dof_map_p])

    def interpolate_velocity(self, func) -> np.ndarray:
        """Nodal P2 interpolant of ``func(x, y) -> (u1, u2)``."""
        xy = self.scalar_dof_coords
        u1, u2 = func(xy[:, 0], xy[:, 1])
        return np.concatenate([np.broadcast_to(u1, len(xy)), np.broadcast_to(u2, len(xy))]).astype(float)

    def interpolate_pressure(self, func) -> np.ndarray:
        if self.pressure_kind == TAYLOR_HOOD:
            xy = self.mesh.vertices
            return np.broadcast_to(func(xy[:, 0], xy[:, 1]), len(xy)).astype(float)
        xy = self.mesh.vertices[self.mesh.cells].reshape(-1, 2)
        return np.broadcast_to(func(xy[:, 0], xy[:, 1]), len(xy)).astype(float)

    def vertex_velocity(self, u: np.ndarray) -> np.ndarray:
        nv = self.mesh.n_vertices
        return np.column_stack([u[:nv], u[self.n_scalar:self.n_scalar + nv]])


def build_space(mesh: Mesh, pressure_kind: str = TAYLOR_HOOD) -> MixedSpace:
    return MixedSpace(mesh, pressure_kind)


def channel_inflow(y):
    return 6.0 / CHANNEL_HEIGHT**2 * y * (CHANNEL_HEIGHT - y)


def tagged_velocity(problem: str, tag: str, x, y):
    """Boundary velocity of a benchmark on edges carrying ``tag``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    zero = np.zeros(np.broadcast(x, y).shape)
    if tag in ("wall", "obstacle"):
        return zero, zero
    if problem == "cavity" and tag == "lid":
        return zero + 1.0, zero
    if problem == "channel" and tag in ("inflow", "outflow"):
        return channel_inflow(y) + zero, zero
    raise ValueError(f"tag {tag!r} does not belong to problem {problem!r}")


def lid_profile(point, problem: str = "cavity") -> tuple[float, float]:
    """Prescribed velocity at a boundary point of the cavity or channel."""
    x, y = map(float, point)
    tol = 1e-12
    if problem == "cavity":
        on_side = min(abs(x), abs(x - 1), abs(y)) < tol
        on_lid = abs(y - 1) < tol
        if not (0 - tol <= x <= 1 + tol and 0 - tol <= y <= 1 + tol) or not (on_side or on_lid):
            raise ValueError(f"{point} is not on the cavity boundary")
        return (0.0, 0.0) if on_side else (1.0, 0.0)
    if problem == "channel":
        from .mesh import BLOCK_CENTER, BLOCK_SIDE
        half = BLOCK_SIDE / 2
        bx, by = BLOCK_CENTER
        block_dist = max(abs(x - bx), abs(y - by)) - half   # zero on the block surface
        if abs(y) < tol or abs(y - CHANNEL_HEIGHT) < tol:
            return (0.0, 0.0)
        if abs(x) < tol or abs(x - CHANNEL_LENGTH) < tol:
            return (float(channel_inflow(y)), 0.0)
        if abs(block_dist) < tol:
            return (0.0, 0.0)
        raise ValueError(f"{point} is not on the channel boundary")
    raise ValueError(f"unknown problem {problem!r}")


@dataclass(frozen=True)
class DirichletData:
    constrained: np.ndarray   # sorted velocity dof indices
    values: np.ndarray        # value per constrained dof
    free: np.ndarray          # complement, sorted
    n_u: int

    def lift(self) -> np.ndarray:
        """Full velocity vector carrying the boundary values and zero elsewhere."""
        u = np.zeros(self.n_u)
        u[self.constrained] = self.values
        return u


def boundary_scalar_dofs(space: MixedSpace) -> tuple[np.ndarray, np.ndarray]:
    """Boundary scalar dofs and the tag each one takes after corner precedence."""
    mesh = space.mesh
    if len(mesh.boundary_tags) != len(mesh.boundary_edges) or np.any(mesh.boundary_tags == ""):
        raise ValueError("every boundary edge needs a tag")
    rank = {t: i for i, t in enumerate(TAG_PRECEDENCE)}
    best = {}
    edge_index = {tuple(e): i for i, e in enumerate(space.edges)}
    nv = mesh.n_vertices
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        tag = str(tag)
        if tag not in rank:
            raise ValueError(f"boundary edge ({a}, {b}) has unknown tag {tag!r}")
        mid = nv + edge_index[(min(a, b), max(a, b))]
        for d in (int(a), int(b), int(mid)):
            if d not in best or rank[tag] < rank[best[d]]:
                best[d] = tag
    dofs = np.array(sorted(best), dtype=np.int64)
    return dofs, np.array([best[d] for d in dofs])


def build_dirichlet(space: MixedSpace, boundary_value) -> DirichletData:
    """Constrain every boundary velocity dof.

    ``boundary_value(tag, x, y) -> (u1, u2)`` gives the data on edges with that tag.
    """
    dofs, tags = boundary_scalar_dofs(space)
    xy = space.scalar_dof_coords[dofs]
    vals = np.zeros((len(dofs), 2))
    for tag in np.unique(tags):
        sel = tags == tag
        u1, u2 = boundary_value(str(tag), xy[sel, 0], xy[sel, 1])
        vals[sel, 0] = u1
        vals[sel, 1] = u2
    constrained = np.concatenate([dofs, space.n_scalar + dofs])
    values = np.concatenate([vals[:, 0], vals[:, 1]])
    mask = np.ones(space.n_u, dtype=bool)
    mask[constrained] = False
    return DirichletData(constrained, values, np.flatnonzero(mask), space.n_u)
