import numpy as np
import pytest

from dwradapt import fem
from dwradapt.errors import UsageError
from dwradapt.fem import reference
from dwradapt.linalg import solve_cg
from dwradapt.mesh import create_rect_grid, refine_with_closure, uniform_refine


def hanging_mesh():
    """7-cell mesh: 2x2 grid with one cell refined (2 hanging nodes)."""
    return refine_with_closure(create_rect_grid(2, 2), {0})


# ---------------------------------------------------------------------------
# spaces and constraints


def test_q1_dof_counts():
    assert fem.build_space(create_rect_grid(1, 1), 1).dof_count == 4
    assert fem.build_space(create_rect_grid(2, 2), 1).dof_count == 9


def test_q1_hanging_constraints():
    V = fem.build_space(hanging_mesh(), 1)
    assert len(V.constraints) == 2
    for masters, coeffs in V.constraints.values():
        assert len(masters) == 2
        assert coeffs == (0.5, 0.5)


def test_q2_hanging_constraints_sum_to_one():
    V = fem.build_space(hanging_mesh(), 2)
    assert len(V.constraints) == 6   # per hanging edge: vertex + 2 fine edges
    for masters, coeffs in V.constraints.values():
        assert sum(coeffs) == pytest.approx(1.0, abs=1e-15)
        # single-level: masters are unconstrained
        for m in masters:
            assert m not in V.constraints


def test_invalid_degree():
    with pytest.raises(UsageError):
        fem.build_space(create_rect_grid(1, 1), 3)


# ---------------------------------------------------------------------------
# element matrices (hand integration)


def test_unit_cell_stiffness():
    V = fem.build_space(create_rect_grid(1, 1), 1)
    K = fem.assemble_operator(V, fem.FormDescriptor.stiffness()).todense()
    expected = np.array([[4, -1, -2, -1],
                         [-1, 4, -1, -2],
                         [-2, -1, 4, -1],
                         [-1, -2, -1, 4]]) / 6.0
    assert np.allclose(K, expected, atol=1e-14)


def test_unit_cell_mass():
    V = fem.build_space(create_rect_grid(1, 1), 1)
    M = fem.assemble_operator(V, fem.FormDescriptor.mass()).todense()
    expected = np.array([[4, 2, 1, 2],
                         [2, 4, 2, 1],
                         [1, 2, 4, 2],
                         [2, 1, 2, 4]]) / 36.0
    assert np.allclose(M, expected, atol=1e-15)
    assert M.sum() == pytest.approx(1.0, abs=1e-14)


def test_stiffness_interior_row_sums():
    # constants lie in the kernel of the gradient form
    V = fem.build_space(create_rect_grid(4, 4), 1)
    K = fem.assemble_operator(V, fem.FormDescriptor.stiffness())
    prod = K @ np.ones(V.dof_count)
    interior = np.setdiff1d(np.arange(V.dof_count), V.boundary_dofs())
    assert np.abs(prod[interior]).max() <= 1e-13


def test_mass_row_sums_are_basis_integrals():
    V = fem.build_space(hanging_mesh(), 1)
    M = fem.assemble_operator(V, fem.FormDescriptor.mass())
    row_sums = M @ np.ones(V.dof_count)
    load = fem.assemble_load(V, f=1.0, rule=2)
    free = ~V.constrained_mask()
    assert np.allclose(row_sums[free], load[free], atol=1e-14)
    # partition of unity: total mass equals the domain area
    assert load.sum() == pytest.approx(1.0, abs=1e-14)


def test_nonlinear_form_needs_linearization_point():
    V = fem.build_space(create_rect_grid(2, 2), 1)
    form = fem.FormDescriptor.stiffness() + fem.FormDescriptor.semilinear_cubic()
    with pytest.raises(UsageError):
        fem.assemble_operator(V, form)


# ---------------------------------------------------------------------------
# quadrature exactness


@pytest.mark.parametrize("i,j", [(0, 0), (1, 2), (3, 3), (2, 3)])
def test_gauss_2x2_exact_for_bicubics(i, j):
    pts, wts = reference.gauss_2d(2)
    val = float(np.sum(wts * pts[:, 0] ** i * pts[:, 1] ** j))
    assert val == pytest.approx(1.0 / ((i + 1) * (j + 1)), rel=1e-14)


def test_gauss_3x3_exact_to_degree_five():
    pts, wts = reference.gauss_2d(3)
    val = float(np.sum(wts * pts[:, 0] ** 5 * pts[:, 1] ** 4))
    assert val == pytest.approx(1.0 / 30.0, rel=1e-13)


# ---------------------------------------------------------------------------
# interpolation and evaluation


def test_interpolate_constant():
    V = fem.build_space(hanging_mesh(), 1)
    f = fem.nodal_interpolate(V, 1.0)
    assert np.allclose(f.coefficients, 1.0)


def test_interpolate_bilinear_is_exact():
    V = fem.build_space(create_rect_grid(3, 2), 1)
    f = fem.nodal_interpolate(V, lambda x, y: 2 * x - y + 3 * x * y)
    pts, _ = reference.gauss_2d(2)
    vals = fem.batch_eval(f, pts)
    rects = V.rects
    X = rects[:, 0:1] + pts[None, :, 0] * rects[:, 2:3]
    Y = rects[:, 1:2] + pts[None, :, 1] * rects[:, 3:4]
    assert np.abs(vals - (2 * X - Y + 3 * X * Y)).max() <= 1e-14


def test_interpolation_error_matches_dense_sampling_oracle():
    # max interpolation error of x^2 at quadrature points equals the
    # brute-force maximum over a dense sample grid (both are h^2/8-type)
    V = fem.build_space(create_rect_grid(2, 2), 1)
    f = fem.nodal_interpolate(V, lambda x, y: x * x)
    pts, _ = reference.gauss_2d(3)
    qerr = np.abs(fem.batch_eval(f, pts) -
                  (V.rects[:, 0:1] + pts[None, :, 0] * V.rects[:, 2:3]) ** 2).max()
    xs = np.linspace(0, 1, 101)
    dense_err = 0.0
    for x in xs:
        for y in xs[::10]:
            dense_err = max(dense_err, abs(fem.evaluate(f, x, y) - x * x))
    # dense sampling includes the error maximizer (cell-edge midpoints);
    # quadrature points only get close
    assert qerr <= dense_err + 1e-13
    assert dense_err == pytest.approx((0.5 ** 2) / 4, abs=1e-12)


def test_evaluate_simple():
    V = fem.build_space(create_rect_grid(4, 4), 1)
    one = fem.nodal_interpolate(V, 1.0)
    assert fem.evaluate(one, 0.37, 0.77) == pytest.approx(1.0, abs=1e-14)
    lin = fem.nodal_interpolate(V, lambda x, y: x + y)
    assert fem.evaluate(lin, 0.25, 0.75) == pytest.approx(1.0, abs=1e-14)


def test_hanging_vertex_continuity_audit():
    mesh = refine_with_closure(hanging_mesh(), {5})
    for degree in (1, 2):
        V = fem.build_space(mesh, degree)
        f = fem.nodal_interpolate(V, lambda x, y: np.cos(x) * y + x * x)
        for m, (a, b), coarse, fines in mesh.hanging_nodes:
            x, y = mesh.coords(m)
            vals = [fem.evaluate_in_cell(f, c, x, y)
                    for c in (coarse,) + tuple(fines)]
            assert max(vals) - min(vals) <= 1e-13


def test_constraint_consistency_after_solve():
    mesh = refine_with_closure(hanging_mesh(), {4})
    V = fem.build_space(mesh, 1)
    A = fem.assemble_operator(V, fem.FormDescriptor.stiffness())
    b = fem.assemble_load(V, f=1.0, rule=3)
    A, b = fem.apply_dirichlet(A, b, V, 0.0)
    x, rep = solve_cg(A, b, tol=1e-13)
    assert rep.converged
    u = fem.FeFunction(V, x)
    u.enforce_constraints()
    for dof, (masters, coeffs) in V.constraints.items():
        combo = sum(c * u.coefficients[m] for m, c in zip(masters, coeffs))
        assert abs(u.coefficients[dof] - combo) <= 1e-12


# ---------------------------------------------------------------------------
# Dirichlet conditions


def test_dirichlet_homogeneous_zeroes_boundary():
    V = fem.build_space(create_rect_grid(3, 3), 1)
    A = fem.assemble_operator(V, fem.FormDescriptor.stiffness())
    b = fem.assemble_load(V, f=1.0)
    A2, b2 = fem.apply_dirichlet(A, b, V, 0.0)
    x, _ = solve_cg(A2, b2, tol=1e-14)
    assert np.abs(x[V.boundary_dofs()]).max() == 0.0


def test_dirichlet_bilinear_exactness():
    # g = x + y harmonic and bilinear: captured exactly by Q1
    V = fem.build_space(create_rect_grid(4, 4), 1)
    A = fem.assemble_operator(V, fem.FormDescriptor.stiffness())
    A2, b2 = fem.apply_dirichlet(A, np.zeros(V.dof_count), V,
                                 lambda x, y: x + y)
    x, _ = solve_cg(A2, b2, tol=1e-14)
    exact = fem.nodal_interpolate(V, lambda x, y: x + y)
    assert np.abs(x - exact.coefficients).max() <= 1e-12


def test_dirichlet_one_side_matches_row_replacement_oracle():
    V = fem.build_space(create_rect_grid(3, 3), 1)
    A = fem.assemble_operator(V, fem.FormDescriptor.stiffness())
    b = fem.assemble_load(V, f=1.0)
    g = lambda x, y: 1.0 + 2.0 * y
    A2, b2 = fem.apply_dirichlet(A, b, V, {2: g})

    # oracle: naive row replacement on the dense matrix, then symmetrize
    # columns by forward substitution of the known values
    bdofs = V.boundary_dofs({2})
    gv = g(V.dof_points[bdofs, 0], V.dof_points[bdofs, 1])
    D = A.todense()
    bo = b.copy()
    for d, val in zip(bdofs, gv):
        bo -= D[:, d] * val
        D[:, d] = 0.0
        D[d, :] = 0.0
        D[d, d] = 1.0
        bo[d] = val
    # untouched rows unchanged, entry-wise
    assert np.allclose(A2.todense(), D, atol=1e-15)
    assert np.allclose(b2, bo, atol=1e-14)
    free = np.setdiff1d(np.arange(V.dof_count), bdofs)
    assert np.allclose(A2.todense()[np.ix_(free, free)],
                       A.todense()[np.ix_(free, free)], atol=1e-16)


# ---------------------------------------------------------------------------
# patch recovery


def test_recovery_reproduces_x_squared():
    mesh = uniform_refine(create_rect_grid(1, 1), 1)
    V = fem.build_space(mesh, 1)
    f = fem.nodal_interpolate(V, lambda x, y: x * x)
    rec = fem.patch_recover(f)
    rng = np.random.default_rng(11)
    for x, y in rng.random((20, 2)):
        assert fem.evaluate(rec, x, y) == pytest.approx(x * x, abs=1e-13)


def test_recovery_bilinear_gives_zero_weight():
    mesh = uniform_refine(create_rect_grid(2, 2), 1)
    V = fem.build_space(mesh, 1)
    f = fem.nodal_interpolate(V, lambda x, y: 1 + x - 2 * y + x * y)
    rec = fem.patch_recover(f)
    pts, _ = reference.gauss_2d(3)
    vals_rec = fem.batch_eval(rec, pts)
    vals_f = fem.batch_eval(f, pts)
    assert np.abs(vals_rec - vals_f).max() <= 1e-13


def test_recovery_matches_vandermonde_oracle():
    # random nodal values on one intact patch: recovered function equals the
    # direct 9-point tensor-quadratic interpolation at 25 sample points
    mesh = uniform_refine(create_rect_grid(1, 1), 1)
    V = fem.build_space(mesh, 1)
    rng = np.random.default_rng(23)
    f = fem.FeFunction(V, rng.standard_normal(V.dof_count))
    rec = fem.patch_recover(f)

    # oracle: solve the 9x9 Vandermonde system for the biquadratic
    nodes = np.array([(x, y) for y in (0.0, 0.5, 1.0) for x in (0.0, 0.5, 1.0)])
    vals = np.array([fem.evaluate(f, x, y) for x, y in nodes])
    powers = [(i, j) for j in range(3) for i in range(3)]
    Vd = np.array([[x ** i * y ** j for i, j in powers] for x, y in nodes])
    coef = np.linalg.solve(Vd, vals)

    sample = np.array([(x, y) for x in np.linspace(0.05, 0.95, 5)
                       for y in np.linspace(0.05, 0.95, 5)])
    for x, y in sample:
        oracle = sum(c * x ** i * y ** j for c, (i, j) in zip(coef, powers))
        assert fem.evaluate(rec, x, y) == pytest.approx(oracle, abs=1e-12)


def test_recovery_copies_on_broken_patches():
    mesh = create_rect_grid(2, 2)   # level-0 cells: no patches at all
    V = fem.build_space(mesh, 1)
    f = fem.nodal_interpolate(V, lambda x, y: np.sin(x + y))
    rec = fem.patch_recover(f)
    pts, _ = reference.gauss_2d(3)
    assert np.abs(fem.batch_eval(rec, pts) - fem.batch_eval(f, pts)).max() <= 1e-14


def test_recovery_requires_q1():
    V = fem.build_space(uniform_refine(create_rect_grid(1, 1), 1), 2)
    f = fem.nodal_interpolate(V, 1.0)
    with pytest.raises(UsageError):
        fem.patch_recover(f)


# ---------------------------------------------------------------------------
# goal-functional assembly


def test_functional_vector_partition_of_unity():
    from dwradapt.problems import GoalFunctional

    mesh = create_rect_grid(2, 2)
    V = fem.build_space(mesh, 1)
    goal = GoalFunctional.subdomain_mean((0.0, 1.0, 0.0, 1.0)).bind(mesh)
    vec = fem.assemble_functional(V, goal)
    assert vec.sum() == pytest.approx(1.0, abs=1e-13)


def test_regularized_point_vector_unit_mass():
    from dwradapt.problems import GoalFunctional

    mesh = uniform_refine(create_rect_grid(2, 2), 1)
    V = fem.build_space(mesh, 1)
    goal = GoalFunctional.point_value((0.5, 0.5)).bind(mesh)
    vec = fem.assemble_functional(V, goal)
    assert vec.sum() == pytest.approx(1.0, abs=1e-12)


def test_linear_goal_state_independent():
    from dwradapt.problems import GoalFunctional

    mesh = create_rect_grid(2, 2)
    V = fem.build_space(mesh, 1)
    goal = GoalFunctional.rhs_functional(1.0).bind(mesh)
    u1 = fem.nodal_interpolate(V, lambda x, y: x)
    u2 = fem.nodal_interpolate(V, lambda x, y: np.sin(7 * x) * y)
    v1 = fem.assemble_functional(V, goal, state=u1)
    v2 = fem.assemble_functional(V, goal, state=u2)
    assert np.array_equal(v1, v2)


# ---------------------------------------------------------------------------
# adjoint consistency of the cubic linearization


def test_semilinear_linearization_finite_differences():
    mesh = uniform_refine(create_rect_grid(2, 2), 1)
    V = fem.build_space(mesh, 1)
    form = fem.FormDescriptor.stiffness() + fem.FormDescriptor.semilinear_cubic()
    rng = np.random.default_rng(2)
    u = fem.FeFunction(V, rng.standard_normal(V.dof_count))
    u.enforce_constraints()
    phi = fem.FeFunction(V, rng.standard_normal(V.dof_count))
    phi.enforce_constraints()
    z = fem.FeFunction(V, rng.standard_normal(V.dof_count))
    z.enforce_constraints()

    def a_of(uv):
        # a(u)(z) = z^T (K u + N(u)) with the cubic vector
        K = fem.assemble_operator(V, fem.FormDescriptor.stiffness())
        nl = fem.assemble_semilinear_vector(V, uv, 1.0)
        return float(z.coefficients @ ((K @ uv.coefficients) + nl))

    J = fem.assemble_operator(V, form, linearization_point=u)
    exact = float(z.coefficients @ (J @ phi.coefficients))
    errs = []
    for eps in (1e-4, 1e-5, 1e-6):
        up = fem.FeFunction(V, u.coefficients + eps * phi.coefficients)
        fd = (a_of(up) - a_of(u)) / eps
        errs.append(abs(fd - exact))
    # first-order decay in eps
    assert errs[1] <= 0.2 * errs[0]
    assert errs[2] <= 0.2 * errs[1]
    assert errs[0] <= 1e-2
