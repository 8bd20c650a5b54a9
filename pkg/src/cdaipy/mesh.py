"""Structured triangulations of the benchmark domains and the coarse observation grid.

Meshes are tensor-product grids split into triangles, so every mesh remembers
the x and y grid lines it was built from. The coarse overlay uses those lines
to check that coarse cell boundaries never cut a fine triangle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TAGS = ("wall", "lid", "inflow", "outflow", "obstacle")

CHANNEL_LENGTH = 2.2
CHANNEL_HEIGHT = 0.41
BLOCK_CENTER = (0.2, 0.2)
BLOCK_SIDE = 0.1

_ALIGN_TOL = 1e-9


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray          # (nv, 2)
    cells: np.ndarray             # (nc, 3), counterclockwise
    boundary_edges: np.ndarray    # (nb, 2)
    boundary_tags: np.ndarray     # (nb,) tag names
    xlines: np.ndarray
    ylines: np.ndarray
    domain: str = "square"
    barycentric: bool = False

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def h_max(self) -> float:
        return float(cell_diameters(self).max())

    def cell_areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.cells)

    def area(self) -> float:
        return float(self.cell_areas().sum())

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique edges (sorted vertex pairs, lexicographic) and the edge index of
        each local edge, shape (nc, 3). Local edge i is opposite local vertex i."""
        return _edges(self.cells)


def signed_areas(vertices, cells):
    p0, p1, p2 = (vertices[cells[:, i]] for i in range(3))
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def cell_diameters(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices[mesh.cells]
    lengths = [np.linalg.norm(v[:, (i + 1) % 3] - v[:, i], axis=1) for i in range(3)]
    return np.max(lengths, axis=0)


def _local_edges(cells):
    # local edge i joins the two vertices other than vertex i
    return np.stack([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1)


def _edges(cells):
    loc = np.sort(_local_edges(cells).reshape(-1, 2), axis=1)
    edges, inverse = np.unique(loc, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def edge_incidence(cells) -> tuple[np.ndarray, np.ndarray]:
    """Unique edges and how many cells contain each one."""
    edges, cell_edges = _edges(cells)
    counts = np.bincount(cell_edges.ravel(), minlength=len(edges))
    return edges, counts


def check_conformity(mesh: Mesh) -> None:
    """Raise MeshError unless the mesh is a valid conforming triangulation."""
    areas = mesh.cell_areas()
    if np.any(areas <= 0):
        raise MeshError(f"{np.sum(areas <= 0)} cells with non-positive area")
    edges, counts = edge_incidence(mesh.cells)
    if np.any((counts < 1) | (counts > 2)):
        raise MeshError("edge shared by more than two cells")
    boundary = {tuple(e) for e in edges[counts == 1]}
    tagged = [tuple(sorted(e)) for e in mesh.boundary_edges]
    if len(set(tagged)) != len(tagged):
        raise MeshError("boundary edge listed twice")
    if set(tagged) != boundary:
        raise MeshError("tagged boundary edges do not match the mesh boundary")
    bad = set(np.unique(mesh.boundary_tags)) - set(TAGS)
    if bad:
        raise MeshError(f"unknown boundary tags {sorted(bad)}")


def _grid(xs, ys, keep_square=None):
    """Triangulate the tensor grid xs x ys; vertices numbered row-major (x fastest)."""
    nx, ny = len(xs) - 1, len(ys) - 1
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    if keep_square is not None:
        mask = keep_square(xs[i], xs[i + 1], ys[j], ys[j + 1])
        i, j = i[mask], j[mask]
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)

    # drop vertices no longer used, keeping row-major order
    used = np.zeros(len(verts), dtype=bool)
    used[cells.ravel()] = True
    renum = -np.ones(len(verts), dtype=np.int64)
    renum[used] = np.arange(used.sum())
    return verts[used], renum[cells]


def _boundary(cells):
    edges, counts = edge_incidence(cells)
    bnd = edges[counts == 1]
    # orient each boundary edge as it appears in its (counterclockwise) cell
    loc = _local_edges(cells).reshape(-1, 2)
    key = {tuple(sorted(e)): tuple(e) for e in loc}
    return np.array([key[tuple(e)] for e in bnd], dtype=np.int64).reshape(-1, 2)


def build_unit_square(n: int) -> Mesh:
    """Unit square split into n x n squares, each cut into 2 triangles.

    The top side y=1 is tagged ``lid``, the rest ``wall``.
    """
    if int(n) != n or n < 1:
        raise MeshError(f"need at least one subdivision per side, got {n}")
    n = int(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    verts, cells = _grid(xs, xs)
    edges = _boundary(cells)
    mid_y = verts[edges].mean(axis=1)[:, 1]
    tags = np.where(np.isclose(mid_y, 1.0), "lid", "wall").astype("<U8")
    return Mesh(verts, cells, edges, tags, xs, xs.copy(), domain="square")


def build_channel_with_block(nx: int = 88, ny: int = 41) -> Mesh:
    """Channel [0, 2.2] x [0, 0.41] with the square block of side 0.1 centered at (0.2, 0.2) removed.

    ``nx`` and ``ny`` count grid cells along the length and height; the block
    edges at 0.15 and 0.25 must fall on grid lines, which means nx is a
    multiple of 44 and ny a multiple of 41.
    """
    xs = np.linspace(0.0, CHANNEL_LENGTH, nx + 1)
    ys = np.linspace(0.0, CHANNEL_HEIGHT, ny + 1)
    lo = BLOCK_CENTER[0] - BLOCK_SIDE / 2, BLOCK_CENTER[1] - BLOCK_SIDE / 2
    hi = BLOCK_CENTER[0] + BLOCK_SIDE / 2, BLOCK_CENTER[1] + BLOCK_SIDE / 2
    for val, lines, name in ((lo[0], xs, "nx"), (hi[0], xs, "nx"), (lo[1], ys, "ny"), (hi[1], ys, "ny")):
        if np.min(np.abs(lines - val)) > _ALIGN_TOL:
            raise MeshError(
                f"block edge {val:g} is not on a grid line; {name} must make it one "
                "(nx a multiple of 44, ny a multiple of 41)"
            )
    # snap block lines exactly
    for val in (lo[0], hi[0]):
        xs[np.argmin(np.abs(xs - val))] = val
    for val in (lo[1], hi[1]):
        ys[np.argmin(np.abs(ys - val))] = val

    def outside(x0, x1, y0, y1):
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        inside = (cx > lo[0]) & (cx < hi[0]) & (cy > lo[1]) & (cy < hi[1])
        return ~inside

    verts, cells = _grid(xs, ys, outside)
    edges = _boundary(cells)
    mid = verts[edges].mean(axis=1)
    tags = np.full(len(edges), "obstacle", dtype="<U8")
    tags[np.isclose(mid[:, 1], 0.0) | np.isclose(mid[:, 1], CHANNEL_HEIGHT)] = "wall"
    tags[np.isclose(mid[:, 0], 0.0)] = "inflow"
    tags[np.isclose(mid[:, 0], CHANNEL_LENGTH)] = "outflow"
    return Mesh(verts, cells, edges, tags, xs, ys, domain="channel")


def barycentric_refine(mesh: Mesh) -> Mesh:
    """Split every cell into three by joining its vertices to its barycenter."""
    nv = mesh.n_vertices
    centers = mesh.vertices[mesh.cells].mean(axis=1)
    verts = np.vstack([mesh.vertices, centers])
    m = nv + np.arange(mesh.n_cells)
    a, b, c = mesh.cells.T
    cells = np.stack(
        [np.column_stack([a, b, m]), np.column_stack([b, c, m]), np.column_stack([c, a, m])], axis=1
    ).reshape(-1, 3)
    return Mesh(
        verts, cells, mesh.boundary_edges.copy(), mesh.boundary_tags.copy(),
        mesh.xlines, mesh.ylines, domain=mesh.domain, barycentric=True,
    )


@dataclass(frozen=True)
class CoarseOverlay:
    H: float
    cell_of_fine: np.ndarray      # (nc,) coarse index of every fine cell
    coarse_measures: np.ndarray   # (ncoarse,)
    coarse_ij: np.ndarray         # (ncoarse, 2) grid position (ix, iy)
    grid_shape: tuple[int, int]   # (columns, rows) of the full coarse grid
    n_fine_cells: int = field(default=0)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_measures)

    @property
    def is_full_grid(self) -> bool:
        return self.n_coarse == self.grid_shape[0] * self.grid_shape[1]

    @property
    def is_uniform_grid(self) -> bool:
        """Full coarse grid of unclipped H x H squares (a rectangle of data)."""
        return self.is_full_grid and bool(np.allclose(self.coarse_measures, self.H**2, rtol=1e-10))


def _aligned(H, lines):
    x0, x1 = lines[0], lines[-1]
    k = np.arange(1, int(np.floor((x1 - x0) / H + _ALIGN_TOL)) + 1)
    ticks = x0 + k * H
    ticks = ticks[ticks < x1 - _ALIGN_TOL]
    if len(ticks) == 0:
        return True
    dist = np.min(np.abs(ticks[:, None] - lines[None, :]), axis=1)
    return bool(np.all(dist <= _ALIGN_TOL * max(1.0, x1 - x0)))


def admissible_H(mesh: Mesh) -> list[float]:
    """Coarse sizes whose grid lines all fall on fine grid lines."""
    span = min(mesh.xlines[-1] - mesh.xlines[0], mesh.ylines[-1] - mesh.ylines[0])
    steps = np.unique(np.round(np.concatenate([np.diff(mesh.xlines), np.diff(mesh.ylines)]), 12))
    out = []
    for base in steps:
        for k in range(1, int(round(span / base)) + 1):
            H = k * base
            if _aligned(H, mesh.xlines) and _aligned(H, mesh.ylines):
                out.append(float(H))
    return sorted(set(np.round(out, 12)))


def build_coarse_overlay(mesh: Mesh, H: float) -> CoarseOverlay:
    """Overlay of axis-aligned squares of side H, clipped to the domain.

    Coarse cells without fluid (inside the obstacle) are dropped. Coarse cells
    are numbered row by row, x fastest.
    """
    if H <= 0:
        raise MeshError(f"coarse size must be positive, got {H}")
    if not (_aligned(H, mesh.xlines) and _aligned(H, mesh.ylines)):
        opts = ", ".join(f"{h:.6g}" for h in admissible_H(mesh)[:12])
        raise MeshError(f"H={H:.6g} does not align with the fine grid lines; admissible H: {opts}")
    x0, y0 = mesh.xlines[0], mesh.ylines[0]
    mx = int(np.ceil((mesh.xlines[-1] - x0) / H - _ALIGN_TOL))
    my = int(np.ceil((mesh.ylines[-1] - y0) / H - _ALIGN_TOL))
    cent = mesh.vertices[mesh.cells].mean(axis=1)
    ix = np.minimum(np.floor((cent[:, 0] - x0) / H).astype(np.int64), mx - 1)
    iy = np.minimum(np.floor((cent[:, 1] - y0) / H).astype(np.int64), my - 1)

    # every vertex of a fine cell must sit in the closed coarse box of its centroid
    v = mesh.vertices[mesh.cells]
    tol = _ALIGN_TOL * max(1.0, H)
    lox, loy = x0 + ix * H, y0 + iy * H
    inside = (
        (v[:, :, 0] >= lox[:, None] - tol) & (v[:, :, 0] <= lox[:, None] + H + tol)
        & (v[:, :, 1] >= loy[:, None] - tol) & (v[:, :, 1] <= loy[:, None] + H + tol)
    )
    if not inside.all():
        raise MeshError(f"fine cells straddle coarse cells for H={H:.6g}")

    flat = iy * mx + ix
    present = np.unique(flat)
    index = -np.ones(mx * my, dtype=np.int64)
    index[present] = np.arange(len(present))
    cell_of_fine = index[flat]
    measures = np.bincount(cell_of_fine, weights=mesh.cell_areas(), minlength=len(present))
    coarse_ij = np.column_stack([present % mx, present // mx])
    return CoarseOverlay(float(H), cell_of_fine, measures, coarse_ij, (mx, my), mesh.n_cells)


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, title: str = "cdaipy mesh") -> None:
    """Legacy ASCII VTK unstructured grid; ``point_data`` maps names to per-vertex
    arrays of shape (nv,) or (nv, 2)."""
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.cells]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += ["5"] * mesh.n_cells
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, arr in point_data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [f"{a:.17g}" for a in arr]
            else:
                lines.append(f"VECTORS {name} double")
                lines += [f"{a:.17g} {b:.17g} 0" for a, b in arr[:, :2]]
    Path(path).write_text("\n".join(lines) + "\n")
