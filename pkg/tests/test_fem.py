import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from bdfqns.fem import (
    assemble_convection,
    assemble_convection_jacobian,
    assemble_convection_transposed_role,
    assemble_linear_operators,
    assemble_load,
    build_mixed_space,
    error_norms,
    interpolate,
    interpolate_pressure,
    interpolate_velocity,
    mass_norm,
    write_vtk,
)
from bdfqns.mesh import unit_square_mesh
from bdfqns.quadrature import assembly_rule


def field(fx, fy):
    return lambda x, y, t: np.array([fx(x, y) + 0 * x, fy(x, y) + 0 * y])


def random_interior(space, rng):
    v = rng.standard_normal(space.n_u)
    v[space.dirichlet_dofs] = 0.0
    return v


def test_dof_counts():
    s = build_mixed_space(unit_square_mesh(1))
    assert (s.n_u, s.n_p) == (18, 4)
    s2 = build_mixed_space(unit_square_mesh(2))
    assert s2.n_p == 9
    assert s2.boundary_node_mask.sum() == 16
    assert s2.dirichlet_mask.sum() == 32


def test_no_dirichlet_markers():
    s = build_mixed_space(unit_square_mesh(2), dirichlet_markers=())
    assert s.dirichlet_dofs.size == 0


def test_operator_symmetry_and_definiteness(space4):
    ops = assemble_linear_operators(space4, nu=0.7, mu=0.3)
    for m in (ops.M, ops.A, ops.Gd, ops.Mp):
        assert abs(m - m.T).max() < 1e-14
    assert sla.eigvalsh(ops.M.toarray()).min() > 0
    assert sla.eigvalsh(ops.Mp.toarray()).min() > 0
    assert sla.eigvalsh(ops.A.toarray()).min() > -1e-12
    assert sla.eigvalsh(ops.Gd.toarray()).min() > -1e-12


def test_mass_partition_of_unity(space8):
    ops = assemble_linear_operators(space8)
    n = space8.n_nodes
    assert ops.M[:n, :n].sum() == pytest.approx(1.0, abs=1e-13)
    assert ops.Mp.sum() == pytest.approx(1.0, abs=1e-13)
    assert ops.mean.sum() == pytest.approx(1.0, abs=1e-13)


def test_stiffness_kernel_and_scaling(space8):
    ops = assemble_linear_operators(space8, nu=2.5, mu=0.0)
    u = interpolate_velocity(space8, field(lambda x, y: 1.0, lambda x, y: 0.0))
    assert abs(u @ ops.A @ u) < 1e-12
    lin = interpolate_velocity(space8, field(lambda x, y: x, lambda x, y: 0.0))
    # |grad x|^2 over the unit square is 1, scaled by nu
    assert lin @ ops.A @ lin == pytest.approx(2.5, rel=1e-12)
    assert ops.Gd.nnz == 0 or abs(ops.Gd).max() == 0


def test_grad_div_of_divergence_free_field(space8):
    ops = assemble_linear_operators(space8, mu=1.0)
    u = interpolate_velocity(space8, field(lambda x, y: x, lambda x, y: -y))
    assert abs(u @ ops.Gd @ u) < 1e-13
    w = interpolate_velocity(space8, field(lambda x, y: x, lambda x, y: y))
    assert w @ ops.Gd @ w == pytest.approx(4.0, rel=1e-12)


def test_divergence_compatibility(space8):
    ops = assemble_linear_operators(space8)
    u = interpolate_velocity(space8, field(lambda x, y: x**2, lambda x, y: -2 * x * y))
    assert np.abs(ops.Bdiv @ u).max() < 1e-12


def test_divergence_theorem_for_zero_boundary(space8, rng):
    ops = assemble_linear_operators(space8)
    v = random_interior(space8, rng)
    assert abs(np.ones(space8.n_p) @ (ops.Bdiv @ v)) < 1e-12


def test_shuffled_assembly_invariant(space4, rng):
    a = assemble_linear_operators(space4, nu=1.3, mu=0.2)
    perm = rng.permutation(space4.mesh.n_cells)
    b = assemble_linear_operators(space4, nu=1.3, mu=0.2, cell_order=perm)
    for name in ("M", "A", "Bdiv", "Gd", "Mp"):
        assert abs(getattr(a, name) - getattr(b, name)).max() <= 1e-14


def test_convection_zero_and_skew(space8, rng):
    assert abs(assemble_convection(space8, np.zeros(space8.n_u))).max() == 0
    assert abs(assemble_convection_jacobian(space8, np.zeros(space8.n_u))).max() == 0
    for _ in range(5):
        w = rng.standard_normal(space8.n_u)
        v = random_interior(space8, rng)
        val = v @ (assemble_convection(space8, w) @ v)
        assert abs(val) <= 1e-12 * np.linalg.norm(w) * np.linalg.norm(v) ** 2


def test_convection_closed_form(space8):
    w = interpolate_velocity(space8, field(lambda x, y: 1.0, lambda x, y: 0.0))
    v = interpolate_velocity(space8, field(lambda x, y: x, lambda x, y: 0.0))
    # ((w.grad)v + 0.5 div(w) v, v) = int x dx = 1/2
    assert v @ (assemble_convection(space8, w) @ v) == pytest.approx(0.5, rel=1e-12)


def _b_direct(space, u, w):
    """Vector b(u, w, phi_i) evaluated by a separate quadrature loop."""
    rule = assembly_rule()
    g = space.geometry(rule)
    uv, ug = space.velocity_at(u, rule)
    wv, wg = space.velocity_at(w, rule)
    div = ug[..., 0, 0] + ug[..., 1, 1]
    integrand = np.einsum("cqd,cqkd->cqk", uv, wg) + 0.5 * div[..., None] * wv
    out = np.zeros(space.n_u)
    for k in range(2):
        local = np.einsum("cq,cq,qi->ci", g.jw, integrand[..., k], g.phi)
        np.add.at(out, space.cell_nodes + k * space.n_nodes, local)
    return out


def test_convection_matches_direct_quadrature(space4, rng):
    w = rng.standard_normal(space4.n_u)
    v = rng.standard_normal(space4.n_u)
    assert np.allclose(assemble_convection(space4, w) @ v, _b_direct(space4, w, v), atol=1e-13)
    assert np.allclose(assemble_convection_transposed_role(space4, w) @ v, _b_direct(space4, v, w), atol=1e-13)


def test_jacobian_finite_difference(space4, rng):
    w = rng.standard_normal(space4.n_u)
    v = rng.standard_normal(space4.n_u)
    J = assemble_convection_jacobian(space4, w)
    base = assemble_convection(space4, w) @ w
    errs = []
    for eps in (1e-4, 1e-5, 1e-6):
        wp = w + eps * v
        fd = (assemble_convection(space4, wp) @ wp - base) / eps
        errs.append(np.linalg.norm(fd - J @ v))
    # the remainder is exactly eps * b(v, v, .)
    assert errs[1] < errs[0] / 5 and errs[2] < errs[1] / 5
    assert errs[0] < 1e-3 * np.linalg.norm(J @ v)


def test_interpolation_exactness(space8):
    quad = field(lambda x, y: x**2 - x * y + 3, lambda x, y: y**2 + 2 * x)
    u = interpolate(space8, quad, 0.0)
    l2, h1, _ = error_norms(space8, u, None, quad, None, 0.0)
    assert l2 <= 1e-13 and h1 <= 1e-6  # central-difference gradient fallback
    c = interpolate_velocity(space8, field(lambda x, y: 2.0, lambda x, y: -1.0))
    assert np.all(c[: space8.n_nodes] == 2.0) and np.all(c[space8.n_nodes:] == -1.0)
    lin = lambda x, y, t: 1 + 2 * x - y
    p = interpolate(space8, lin, 0.0, kind="pressure")
    _, _, l2p = error_norms(space8, np.zeros(space8.n_u), p, field(lambda x, y: 0, lambda x, y: 0), lin, 0.0)
    assert l2p < 1e-13
    with pytest.raises(ValueError):
        interpolate(space8, lin, 0.0, kind="other")


def test_error_norms_zero():
    s = build_mixed_space(unit_square_mesh(2))
    z = field(lambda x, y: 0.0, lambda x, y: 0.0)
    assert error_norms(s, np.zeros(s.n_u), np.zeros(s.n_p), z, lambda x, y, t: 0 * x, 0.0) == (0.0, 0.0, 0.0)


def test_pressure_error_ignores_constant_shift(space4):
    p = interpolate_pressure(space4, lambda x, y, t: x + 5.0)
    z = field(lambda x, y: 0.0, lambda x, y: 0.0)
    assert error_norms(space4, np.zeros(space4.n_u), p, z, lambda x, y, t: x, 0.0)[2] < 1e-13


def test_interpolation_convergence_order():
    f = field(lambda x, y: np.sin(np.pi * x) * np.cos(y), lambda x, y: np.exp(x * y))
    errs = []
    for n in (4, 8, 16):
        s = build_mixed_space(unit_square_mesh(n))
        errs.append(error_norms(s, interpolate_velocity(s, f), None, f, None, 0.0)[0])
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(np.abs(rates - 3) < 0.15)


def test_load_vector_of_constant(space4):
    b = assemble_load(space4, field(lambda x, y: 1.0, lambda x, y: 2.0), 0.0)
    n = space4.n_nodes
    assert b[:n].sum() == pytest.approx(1.0) and b[n:].sum() == pytest.approx(2.0)


def test_mass_norm(space8):
    ops = assemble_linear_operators(space8)
    u = interpolate_velocity(space8, field(lambda x, y: x, lambda x, y: y))
    assert mass_norm(ops.M, u) == pytest.approx(np.sqrt(2 / 3), rel=1e-12)


def inf_sup_constant(n):
    s = build_mixed_space(unit_square_mesh(n))
    ops = assemble_linear_operators(s)
    f = s.free_dofs
    A = ops.A[f][:, f].tocsc()
    B = ops.Bdiv[:, f].toarray()
    S = B @ spla.splu(A).solve(B.T)
    ev = sla.eigvalsh(0.5 * (S + S.T), ops.Mp.toarray())
    return np.sqrt(ev[1])  # ev[0] is the constant-pressure mode


def test_inf_sup_bounded_below():
    betas = [inf_sup_constant(n) for n in (4, 8, 16)]
    assert min(betas) > 0.1
    for a, b in zip(betas, betas[1:]):
        assert 0.5 < b / a < 2.0


def test_vtk_export(tmp_path, space4):
    u = interpolate_velocity(space4, field(lambda x, y: x, lambda x, y: y))
    p = np.arange(space4.n_p, dtype=float)
    path = tmp_path / "out.vtk"
    write_vtk(space4, u, p, path)
    text = path.read_text()
    assert text.startswith("# vtk DataFile")
    assert f"POINTS {space4.mesh.n_vertices} double" in text
    assert "SCALARS pressure double 1" in text
