import numpy as np
import pytest
import scipy.sparse as sp

from cdaipy.assembly import (ConvectionAssembler, apply_dirichlet, assemble_body_force, assemble_convection,
                             assemble_static, build_nudging, nse_residual, nudging_rhs)
from cdaipy.fespace import SCOTT_VOGELIUS, MixedSpace, build_dirichlet, p1_values, p2_grads, p2_values
from cdaipy.linsolve import coupled_saddle_solve
from cdaipy.mesh import barycentric_refine, build_coarse_overlay, build_unit_square
from cdaipy.problems import Discretization, ManufacturedSolution, ProblemSpec

RNG = np.random.default_rng(1234)


@pytest.fixture(scope="module")
def small():
    mesh = build_unit_square(4)
    space = MixedSpace(mesh)
    ov = build_coarse_overlay(mesh, 0.5)
    return mesh, space, assemble_static(space, ov)


def _sym_err(A):
    A = A.toarray() if sp.issparse(A) else A
    return np.abs(A - A.T).max() / np.abs(A).max()


def test_symmetry(small):
    _, _, ops = small
    for name in ("S", "G", "Mu", "Mp", "D"):
        assert _sym_err(getattr(ops, name)) <= 1e-14, name


def test_definiteness(small):
    _, space, ops = small
    bc = build_dirichlet(space, lambda t, x, y: (0 * x, 0 * x))
    f = bc.free
    for name in ("S", "Mu"):
        ev = np.linalg.eigvalsh(getattr(ops, name)[f][:, f].toarray())
        assert ev.min() > 0, name
    assert np.linalg.eigvalsh(ops.Mp.toarray()).min() > 0
    for name in ("G", "D"):
        ev = np.linalg.eigvalsh(getattr(ops, name).toarray())
        assert ev.min() >= -1e-12 * ev.max(), name


def test_D_of_constant(small):
    _, space, ops = small
    c = np.concatenate([np.ones(space.n_scalar), np.zeros(space.n_scalar)])
    assert abs(c @ (ops.D @ c) - 1.0) <= 1e-12
    assert abs(c @ ops.apply_D(c) - 1.0) <= 1e-12


def test_nudging_reproduces_constants(small):
    _, space, ops = small
    assert np.allclose(ops.nudging.P @ np.ones(space.n_scalar), 1.0, atol=1e-14)


def test_stiffness_symmetric_max(small):
    _, _, ops = small
    S = ops.S.toarray()
    assert np.abs(S - S.T).max() <= 1e-14 * np.abs(S).max()


def test_divergence_free_field_from_stokes(small):
    _, space, ops = small
    bc = build_dirichlet(space, lambda t, x, y: (np.where(t == "lid", 1.0, 0.0) + 0 * x, 0 * x))
    f = bc.free
    sys_ = apply_dirichlet(ops.S, np.zeros(space.n_u), bc)
    uf, _ = coupled_saddle_solve(sys_.A, ops.B[:, f], sys_.rhs, -(ops.B @ bc.lift()), ops.pressure_weights)
    v = sys_.expand(uf)
    assert np.abs(ops.B @ v).max() <= 1e-12


def dense_convection(space, wind):
    """Independent per-element loop: N[i, j] = b(wind, phi_j, phi_i) for one component."""
    rule = space.quad
    phi = p2_values(rule.points)
    gref = p2_grads(rule.points)
    n = space.n_scalar
    N = np.zeros((n, n))
    v = space.mesh.vertices
    for c, cell in enumerate(space.mesh.cells):
        P = v[cell]
        J = np.column_stack([P[1] - P[0], P[2] - P[0]])
        Jinv = np.linalg.inv(J)
        dofs = space.dof_map_scalar[c]
        for q in range(len(rule.weights)):
            w = rule.weights[q] * abs(np.linalg.det(J))
            g = gref[q] @ Jinv
            wq = np.array([phi[q] @ wind[dofs], phi[q] @ wind[space.n_scalar + dofs]])
            for i in range(6):
                for j in range(6):
                    # 1/2 (w . grad phi_j) phi_i - 1/2 (w . grad phi_i) phi_j
                    N[dofs[i], dofs[j]] += w * 0.5 * ((wq @ g[j]) * phi[q, i] - (wq @ g[i]) * phi[q, j])
    return N


def test_convection_matches_dense_oracle_and_is_skew():
    space = MixedSpace(build_unit_square(4))
    wind = RNG.standard_normal(space.n_u)
    N = assemble_convection(space, wind).toarray()
    oracle = dense_convection(space, wind)
    ns = space.n_scalar
    assert np.abs(N[:ns, :ns] - oracle).max() <= 1e-13 * np.abs(oracle).max()
    assert np.abs(N[ns:, ns:] - oracle).max() <= 1e-13 * np.abs(oracle).max()
    assert np.abs(N + N.T).max() <= 1e-12 * np.abs(N).max()


def test_convection_zero_wind():
    space = MixedSpace(build_unit_square(3))
    assert assemble_convection(space, np.zeros(space.n_u)).count_nonzero() == 0


def test_convection_quadratic_form_random():
    space = MixedSpace(build_unit_square(6))
    conv = ConvectionAssembler(space)
    for _ in range(20):
        N = conv.convection(RNG.standard_normal(space.n_u))
        x = RNG.standard_normal(space.n_u)
        assert abs(x @ (N @ x)) <= 1e-12 * sp.linalg.norm(N) * (x @ x)


def test_linearization_is_directional_derivative():
    space = MixedSpace(build_unit_square(3))
    conv = ConvectionAssembler(space)
    u = RNG.standard_normal(space.n_u)
    d = RNG.standard_normal(space.n_u)
    # b(u + t d, u + t d, .) = b(u,u) + t (b(d,u) + b(u,d)) + t^2 b(d,d)
    J = conv.linearization(u)
    lhs = conv.convection(d) @ u
    assert np.allclose(J @ d, lhs, atol=1e-12 * np.abs(lhs).max())
    assert np.allclose(J @ u, conv.convection(u) @ u, atol=1e-12)


def test_nudging_rhs_examples(small):
    _, space, ops = small
    setup = ops.nudging
    nc = setup.overlay.n_coarse
    assert not np.any(nudging_rhs(setup, np.zeros((nc, 2)), 1.0))
    assert not np.any(nudging_rhs(setup, np.ones((nc, 2)), 0.0))
    c = (0.7, -1.3)
    r = nudging_rhs(setup, np.tile(c, (nc, 1)), 2.0)
    v = space.interpolate_velocity(lambda x, y: (0.5 + 0 * x, 2.0 + 0 * x))
    assert abs(r @ v - 2.0 * (c[0] * 0.5 + c[1] * 2.0) * 1.0) <= 1e-12
    # r . v = mu (I_H u_data, I_H v)
    w = RNG.standard_normal(space.n_u)
    proj = setup.project(w, space.n_scalar)
    data = RNG.standard_normal((nc, 2))
    expected = 2.0 * np.sum(setup.W[:, None] * data * proj)
    assert abs(nudging_rhs(setup, data, 2.0) @ w - expected) <= 1e-12 * abs(expected) + 1e-14


def test_nudging_rhs_overlay_mismatch(small):
    mesh, space, ops = small
    other = build_coarse_overlay(mesh, 0.25)
    with pytest.raises(ValueError):
        nudging_rhs(ops.nudging, np.zeros((other.n_coarse, 2)), 1.0)
    with pytest.raises(ValueError):
        nudging_rhs(ops.nudging, np.zeros((ops.nudging.overlay.n_coarse, 2)), 1.0, overlay=other)


def test_nudging_stability_random_fields(small):
    _, space, ops = small
    for _ in range(100):
        v = RNG.standard_normal(space.n_u)
        assert v @ ops.apply_D(v) <= v @ (ops.Mu @ v) * (1 + 1e-12)


def test_interpolation_estimate_slope():
    mesh = build_unit_square(32)
    space = MixedSpace(mesh)
    v = space.interpolate_velocity(lambda x, y: (np.sin(np.pi * x) * np.sin(np.pi * y), 0 * x))
    ratios = []
    for H in (1 / 4, 1 / 8, 1 / 16):
        setup = build_nudging(space, build_coarse_overlay(mesh, H))
        means = setup.project(v, space.n_scalar)
        # ||I_H v - v||^2 = ||v||^2 - sum |K| mean_K^2 (orthogonal projection)
        Mv = MixedSpace(mesh)
        ops = assemble_static(Mv)
        err2 = v @ (ops.Mu @ v) - np.sum(setup.W[:, None] * means**2)
        ratios.append(np.sqrt(err2) / np.sqrt(v @ (ops.S @ v)))
    slopes = np.diff(np.log(ratios)) / np.log(0.5)
    assert np.all(np.abs(slopes - 1) <= 0.1)


def test_grad_div_vanishes_on_sv_divergence_free_field():
    mesh = barycentric_refine(build_unit_square(4))
    space = MixedSpace(mesh, SCOTT_VOGELIUS)
    ops = assemble_static(space)
    bc = build_dirichlet(space, lambda t, x, y: (np.where(t == "lid", 1.0, 0.0) + 0 * x, 0 * x))
    f = bc.free
    sys_ = apply_dirichlet(ops.S, np.zeros(space.n_u), bc)
    uf, _ = coupled_saddle_solve(sys_.A, ops.B[:, f], sys_.rhs, -(ops.B @ bc.lift()), ops.pressure_weights)
    u = sys_.expand(uf)
    assert u @ (ops.G @ u) <= 1e-20


def test_body_force():
    space = MixedSpace(build_unit_square(4))
    assert not np.any(assemble_body_force(space, None))
    F = assemble_body_force(space, lambda x, y: (1.0 + 0 * x, 0 * x))
    ns = space.n_scalar
    assert abs(F[:ns].sum() - 1.0) <= 1e-14 and abs(F[ns:].sum()) <= 1e-15


def test_body_force_manufactured_dense_oracle():
    space = MixedSpace(build_unit_square(4))
    f = ManufacturedSolution(0.5).f
    F = assemble_body_force(space, f)
    rule = space.quad
    phi = p2_values(rule.points)
    lam = p1_values(rule.points)
    oracle = np.zeros(space.n_u)
    v = space.mesh.vertices
    for c, cell in enumerate(space.mesh.cells):
        P = v[cell]
        det = abs(np.linalg.det(np.column_stack([P[1] - P[0], P[2] - P[0]])))
        for q in range(len(rule.weights)):
            x, y = lam[q] @ P
            f1, f2 = f(x, y)
            for i, d in enumerate(space.dof_map_scalar[c]):
                oracle[d] += rule.weights[q] * det * f1 * phi[q, i]
                oracle[space.n_scalar + d] += rule.weights[q] * det * f2 * phi[q, i]
    assert np.abs(F - oracle).max() <= 1e-13 * np.abs(oracle).max()


def test_apply_dirichlet_poisson_linear_exact():
    space = MixedSpace(build_unit_square(5))
    ops = assemble_static(space)
    exact = lambda x, y: (1 + 2 * x - 3 * y, x + y)
    bc = build_dirichlet(space, lambda t, x, y: exact(x, y))
    S_before = ops.S.copy()
    sys_ = apply_dirichlet(ops.S, np.zeros(space.n_u), bc)
    u = sys_.expand(sp.linalg.spsolve(sys_.A.tocsc(), sys_.rhs))
    assert np.abs(u - space.interpolate_velocity(exact)).max() <= 1e-12
    assert (ops.S != S_before).nnz == 0
    assert np.array_equal(u[bc.constrained], bc.values)


def test_apply_dirichlet_zero_data_keeps_rhs():
    space = MixedSpace(build_unit_square(3))
    ops = assemble_static(space)
    bc = build_dirichlet(space, lambda t, x, y: (0 * x, 0 * x))
    rhs = RNG.standard_normal(space.n_u)
    assert np.array_equal(apply_dirichlet(ops.S, rhs, bc).rhs, rhs[bc.free])


def test_residual_zero_state():
    disc = Discretization(ProblemSpec("manufactured", nu=1.0, n=3, exact="linear"))
    ops = disc.ops
    z = np.zeros(disc.space.n_u)
    r, d = nse_residual(ops, 1.0, 1.0, z, np.zeros(disc.space.n_p), np.zeros(disc.space.n_u),
                        disc.convection.convection(z))
    assert not np.any(r) and not np.any(d)
