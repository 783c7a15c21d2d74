import numpy as np
import pytest

import dwradapt.dwr as dwr
import dwradapt.problems as prob
from dwradapt import fem
from dwradapt.errors import UsageError
from dwradapt.fem import reference
from dwradapt.mesh import create_rect_grid, refine_with_closure, uniform_refine

# ---------------------------------------------------------------------------
# the abstract error identity


def quadratic_fixture():
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, 0.0])
    return dwr.AbstractFunctional(
        value=lambda x: 0.5 * x @ A @ x - b @ x,
        derivative=lambda x, d: float((A @ x - b) @ d))


def test_identity_quadratic_exact():
    L = quadratic_fixture()
    x = np.array([2.0 / 3.0, -1.0 / 3.0])      # stationary in R^2
    x_h = np.array([0.5, 0.0])                 # stationary in span{e1}
    est, rem = dwr.abstract_error_identity(L, x, x_h, x_h,
                                           subspace_basis=[[1.0, 0.0]])
    assert est == pytest.approx(-1.0 / 12.0, abs=1e-15)
    assert est == pytest.approx(L.value(x) - L.value(x_h), abs=1e-12)
    assert rem is None


def test_identity_zero_error():
    L = quadratic_fixture()
    x_h = np.array([0.5, 0.0])
    est, rem = dwr.abstract_error_identity(L, x_h, x_h, x_h)
    assert est == 0.0


def test_identity_stationarity_check():
    L = quadratic_fixture()
    with pytest.raises(UsageError):
        dwr.abstract_error_identity(L, [0.6, -0.3], [0.4, 0.0], [0.4, 0.0],
                                    subspace_basis=[[1.0, 0.0]])


def test_identity_cubic_remainder_closes():
    # scalar cubic: estimate + Gauss remainder reproduces L(x) - L(x_h)
    a, b, c = 0.7, -1.1, 0.4
    L = dwr.AbstractFunctional(
        value=lambda x: a * x[0] ** 3 + b * x[0] ** 2 + c * x[0],
        derivative=lambda x, d: (3 * a * x[0] ** 2 + 2 * b * x[0] + c) * d[0],
        third_derivative=lambda x, d1, d2, d3: 6 * a * d1[0] * d2[0] * d3[0])
    x_star = (-2 * b + np.sqrt(4 * b * b - 12 * a * c)) / (6 * a)
    est, rem = dwr.abstract_error_identity(L, [x_star], [0.0], [0.0])
    true = L.value(np.array([x_star])) - L.value(np.array([0.0]))
    assert est + rem == pytest.approx(true, abs=1e-12)
    assert rem is not None and rem != 0.0


def test_trapezoid_kernel_s2():
    left, right = dwr.trapezoid_kernel_check(lambda s: s * s, lambda s: 2.0)
    assert left == pytest.approx(-1.0 / 6.0, abs=1e-12)
    assert right == pytest.approx(-1.0 / 6.0, abs=1e-12)


def test_trapezoid_kernel_linear():
    left, right = dwr.trapezoid_kernel_check(lambda s: 3 * s - 1, lambda s: 0.0)
    assert left == pytest.approx(0.0, abs=1e-14)
    assert right == 0.0


def test_trapezoid_kernel_s4_sides_agree():
    left, right = dwr.trapezoid_kernel_check(lambda s: s ** 4,
                                             lambda s: 12 * s * s)
    assert abs(left - right) <= 1e-10
    # high-resolution quadrature oracle for the true value
    xs, w = np.polynomial.legendre.leggauss(30)
    xs = 0.5 * (xs + 1)
    w = 0.5 * w
    oracle = float(w @ xs**4) - 0.5
    assert left == pytest.approx(oracle, abs=1e-7)


# ---------------------------------------------------------------------------
# marking


def make_estimate(eta):
    eta = np.asarray(eta, dtype=float)
    return dwr.ErrorEstimate(list(range(len(eta))), eta, float(eta.sum()),
                             0.0, 0.0)


def test_error_balancing_marks_above_average():
    est = make_estimate([0.5, 0.3, 0.1, 0.1])
    marked = dwr.mark_cells(est, dwr.MarkingStrategy.error_balancing(1.0))
    assert marked == {0, 1}


def test_error_balancing_strict_inequality_on_ties():
    est = make_estimate([0.25, 0.25, 0.25, 0.25])
    assert dwr.mark_cells(est, dwr.MarkingStrategy.error_balancing(1.0)) == set()
    assert dwr.mark_cells(est, dwr.MarkingStrategy.error_balancing(0.99)) == \
        {0, 1, 2, 3}


def test_fixed_fraction_matches_sort_oracle():
    rng = np.random.default_rng(9)
    eta = rng.random(8)
    est = make_estimate(eta)
    marked = dwr.mark_cells(est, dwr.MarkingStrategy.fixed_fraction(0.25))
    oracle = set(np.argsort(-eta, kind="stable")[:2].tolist())
    assert marked == oracle
    assert len(marked) == 2


def test_fixed_fraction_tie_break_ascending_id():
    est = make_estimate([0.5, 0.5, 0.5, 0.1])
    marked = dwr.mark_cells(est, dwr.MarkingStrategy.fixed_fraction(0.5))
    assert marked == {0, 1}


def test_uniform_marks_all():
    est = make_estimate([1.0, 2.0, 3.0])
    assert dwr.mark_cells(est, dwr.MarkingStrategy.uniform()) == {0, 1, 2}


@pytest.mark.parametrize("strategy", [dwr.MarkingStrategy.error_balancing(1.3),
                                      dwr.MarkingStrategy.fixed_fraction(0.4)])
def test_marking_scale_invariance(strategy):
    rng = np.random.default_rng(17)
    eta = rng.random(20)
    base = dwr.mark_cells(make_estimate(eta), strategy)
    for c in (1e-8, 3.7, 1e9):
        assert dwr.mark_cells(make_estimate(c * eta), strategy) == base


def test_strategy_validation():
    with pytest.raises(UsageError):
        dwr.MarkingStrategy.error_balancing(0.0)
    with pytest.raises(UsageError):
        dwr.MarkingStrategy.fixed_fraction(1.5)


# ---------------------------------------------------------------------------
# effectivity arithmetic (Table-1 style)


def test_effectivity_values():
    assert dwr.effectivity_index(5.57953, 5.59431, 3.1e-2) == \
        pytest.approx(0.477, abs=5e-4)
    assert dwr.effectivity_index(5.57953, 5.58980, 1.8e-2) == \
        pytest.approx(0.571, abs=5e-4)
    assert dwr.effectivity_index(1.0, 1.0, 0.5) == 0.0
    with pytest.raises(UsageError):
        dwr.effectivity_index(1.0, 1.0, 0.0)


# ---------------------------------------------------------------------------
# weighted residuals and Galerkin orthogonality


def solved_p1(nx=4, refinements=1, tol=1e-13):
    p1 = prob.get_problem("p1")
    mesh = uniform_refine(create_rect_grid(nx, nx), refinements)
    space = fem.build_space(mesh, 1)
    u_h, rep = dwr.solve_primal(p1, space, tol=tol)
    assert rep.converged
    return p1, mesh, space, u_h


def test_galerkin_orthogonality_primal():
    p1, mesh, space, u_h = solved_p1()
    rng = np.random.default_rng(3)
    interior = np.setdiff1d(np.arange(space.dof_count), space.boundary_dofs())
    interior = np.setdiff1d(interior, np.nonzero(space.constrained_mask())[0])
    for i in rng.choice(interior, size=6, replace=False):
        e = np.zeros(space.dof_count)
        e[i] = 1.0
        phi = fem.FeFunction(space, e)
        phi.enforce_constraints()
        val = dwr.weighted_primal_residual(p1, u_h, phi)
        norm = float(np.linalg.norm(phi.coefficients))
        assert abs(val) <= 10 * 1e-13 * norm + 1e-14


def test_galerkin_orthogonality_dual():
    p1, mesh, space, u_h = solved_p1()
    bound = p1.goal.bind(mesh)
    z_h, rep = dwr.solve_dual(p1, bound, space, u_h, tol=1e-13)
    rng = np.random.default_rng(5)
    interior = np.setdiff1d(np.arange(space.dof_count), space.boundary_dofs())
    interior = np.setdiff1d(interior, np.nonzero(space.constrained_mask())[0])
    for i in rng.choice(interior, size=6, replace=False):
        e = np.zeros(space.dof_count)
        e[i] = 1.0
        phi = fem.FeFunction(space, e)
        phi.enforce_constraints()
        val = dwr.weighted_dual_residual(p1, bound, u_h, z_h, phi)
        assert abs(val) <= 1e-11


def test_primal_residual_zero_data():
    p1 = prob.get_problem("p1")
    import dataclasses
    p0 = dataclasses.replace(p1, rhs=None)
    mesh = uniform_refine(create_rect_grid(2, 2), 1)
    space = fem.build_space(mesh, 1)
    u0 = fem.zero_function(space)
    w = fem.nodal_interpolate(space, lambda x, y: x * y)
    assert dwr.weighted_primal_residual(p0, u0, w) == 0.0


def test_dual_residual_zero_goal_and_dual():
    # zero goal derivative and z_h = 0: the dual residual vanishes
    p1, mesh, space, u_h = solved_p1(nx=2)

    class ZeroGoal:
        def atoms_for(self, mesh):
            return (np.zeros((1, 2)) + 0.25, np.zeros(1),
                    np.array([mesh.locate(0.25, 0.25)]))

    z0 = fem.zero_function(space)
    w = fem.nodal_interpolate(space, lambda x, y: x + y)
    assert dwr.weighted_dual_residual(p1, ZeroGoal(), u_h, z0, w) == 0.0


def test_symmetric_problem_dual_equals_primal():
    # Laplace with J = F: the dual solution equals the primal, and the dual
    # residual value equals the primal residual on the same weight
    p1 = prob.get_problem("p1")
    mesh = uniform_refine(create_rect_grid(4, 4), 1)
    space = fem.build_space(mesh, 1)
    u_h, _ = dwr.solve_primal(p1, space, tol=1e-14)
    goal = prob.GoalFunctional.rhs_functional(1.0)
    bound = goal.bind(mesh)
    z_h, _ = dwr.solve_dual(p1, bound, space, u_h, tol=1e-14)
    assert np.abs(z_h.coefficients - u_h.coefficients).max() <= 1e-11
    w = fem.patch_recover(z_h)
    rho = dwr.weighted_primal_residual(p1, u_h, w, subtract=z_h)
    rho_star = dwr.weighted_dual_residual(p1, bound, u_h, z_h, w, subtract=u_h)
    assert rho == pytest.approx(rho_star, abs=1e-10)


def test_weight_mesh_mismatch_rejected():
    p1, mesh, space, u_h = solved_p1(nx=2)
    other = fem.build_space(create_rect_grid(3, 3), 1)
    w = fem.nodal_interpolate(other, 1.0)
    with pytest.raises(UsageError):
        dwr.weighted_primal_residual(p1, u_h, w)


# ---------------------------------------------------------------------------
# localization


def estimate_p1(nx=4, refinements=1):
    p1, mesh, space, u_h = solved_p1(nx, refinements)
    bound = p1.goal.bind(mesh)
    z_h, _ = dwr.solve_dual(p1, bound, space, u_h, tol=1e-13)
    rec_z = fem.patch_recover(z_h)
    rec_u = fem.patch_recover(u_h)
    return p1, bound, u_h, z_h, rec_z, rec_u


def test_localization_consistency_primal_only():
    p1, bound, u_h, z_h, rec_z, rec_u = estimate_p1()
    est = dwr.localize_indicators(p1, bound, u_h, z_h, rec_z)
    direct = dwr.weighted_primal_residual(p1, u_h, rec_z, subtract=z_h)
    assert abs(est.signed_estimate - direct) <= 1e-10
    assert est.dual_part == 0.0
    assert est.primal_part == est.signed_estimate


def test_localization_consistency_both_halves():
    p1, bound, u_h, z_h, rec_z, rec_u = estimate_p1()
    est = dwr.localize_indicators(p1, bound, u_h, z_h, rec_z, rec_u)
    direct = 0.5 * dwr.weighted_primal_residual(p1, u_h, rec_z, subtract=z_h) \
        + 0.5 * dwr.weighted_dual_residual(p1, bound, u_h, z_h, rec_u,
                                           subtract=u_h)
    assert abs(est.signed_estimate - direct) <= 1e-10
    # the primal weighted residual equals twice the recorded primal part
    rho = dwr.weighted_primal_residual(p1, u_h, rec_z, subtract=z_h)
    assert rho == pytest.approx(2.0 * est.primal_part, abs=1e-12)


def test_eta_global_is_cell_sum_and_nonnegative():
    p1, bound, u_h, z_h, rec_z, rec_u = estimate_p1()
    est = dwr.localize_indicators(p1, bound, u_h, z_h, rec_z, rec_u)
    assert np.all(est.eta_cells >= 0)
    assert est.eta_global == pytest.approx(float(est.eta_cells.sum()),
                                           rel=1e-12)
    assert est.eta_global >= abs(est.signed_estimate) - 1e-12


def test_localization_requires_recovery():
    p1, bound, u_h, z_h, rec_z, rec_u = estimate_p1(nx=2)
    with pytest.raises(UsageError):
        dwr.localize_indicators(p1, bound, u_h, z_h, None)


def test_bilinear_solution_gives_zero_indicators():
    # a problem whose exact solution is bilinear: all residuals vanish
    import dataclasses
    p1 = prob.get_problem("p1")
    plin = dataclasses.replace(
        p1, rhs=None,
        dirichlet={t: (lambda x, y: x * y) for t in (1, 2, 3, 4)},
        goal=prob.GoalFunctional.subdomain_mean((0.25, 0.75, 0.25, 0.75)))
    mesh = uniform_refine(create_rect_grid(4, 4), 1)
    space = fem.build_space(mesh, 1)
    u_h, _ = dwr.solve_primal(plin, space, tol=1e-14)
    bound = plin.goal.bind(mesh)
    z_h, _ = dwr.solve_dual(plin, bound, space, u_h, tol=1e-14)
    est = dwr.localize_indicators(plin, bound, u_h, z_h,
                                  fem.patch_recover(z_h))
    assert est.eta_cells.max() <= 1e-12


def test_indicator_symmetry():
    # symmetric data: the indicator field respects the mesh symmetry group
    p1, bound, u_h, z_h, rec_z, rec_u = estimate_p1(nx=4)
    est = dwr.localize_indicators(p1, bound, u_h, z_h, rec_z, rec_u)
    mesh = u_h.space.mesh
    centers = {cid: mesh.cell_center(cid) for cid in mesh.active_ids}
    eta = {centers[cid]: est.eta_cells[i]
           for i, cid in enumerate(mesh.active_ids)}
    worst = 0.0
    for (cx, cy), v in eta.items():
        for mx, my in ((1 - cx, cy), (cx, 1 - cy), (cy, cx)):
            worst = max(worst, abs(v - eta[(mx, my)]))
    assert worst <= 1e-10


def test_localization_vs_brute_force_cell_oracle():
    # independent per-cell quadrature of (R, w)_K + (r, w)_dK on a uniform
    # mesh (all patches intact, weight continuous)
    p1, bound, u_h, z_h, rec_z, rec_u = estimate_p1(nx=4, refinements=1)
    est = dwr.localize_indicators(p1, bound, u_h, z_h, rec_z)
    mesh = u_h.space.mesh
    gx, gw = np.polynomial.legendre.leggauss(5)
    gx = 0.5 * (gx + 1)
    gw = 0.5 * gw

    def w_at(cid, x, y):
        return fem.evaluate_in_cell(rec_z, cid, x, y) - \
            fem.evaluate_in_cell(z_h, cid, x, y)

    def grad_u(cid, x, y):
        _, g = fem.eval_in_cells(u_h, [cid], [(x, y)], gradient=True)
        return g[0]

    oracle = np.zeros(len(mesh.active_ids))
    for row, cid in enumerate(mesh.active_ids):
        x0, y0, hx, hy = mesh.cell_rect(cid)
        acc = 0.0
        for i in range(5):
            for j in range(5):
                x, y = x0 + gx[i] * hx, y0 + gx[j] * hy
                acc += gw[i] * gw[j] * hx * hy * 1.0 * w_at(cid, x, y)
        # edge terms: half jump of the normal derivative
        for le, nrm in enumerate(((0, -1), (1, 0), (0, 1), (-1, 0))):
            a, b = mesh.cell_edge_vertices(cid, le)
            rec = mesh.edge_info[(cid, le)]
            if rec[0] != "conforming":
                continue   # uniform mesh: boundary handled by w = 0 there
            nb = rec[1]
            ax, ay = mesh.coords(a)
            bx, by = mesh.coords(b)
            length = np.hypot(bx - ax, by - ay)
            for t, wt in zip(gx, gw):
                x, y = ax + t * (bx - ax), ay + t * (by - ay)
                jump = (grad_u(cid, x, y) - grad_u(nb, x, y)) @ np.array(nrm)
                acc += -0.5 * jump * w_at(cid, x, y) * wt * length
        oracle[row] = abs(acc)
    assert np.abs(est.eta_cells - oracle).max() <= 1e-12
    assert abs(est.eta_cells.sum() - oracle.sum()) <= 1e-12


# ---------------------------------------------------------------------------
# gradient-jump indicators


def test_gradient_jump_indicators_zero_for_bilinear():
    mesh = uniform_refine(create_rect_grid(2, 2), 1)
    space = fem.build_space(mesh, 1)
    f = fem.nodal_interpolate(space, lambda x, y: 3 * x - y)
    assert dwr.gradient_jump_indicators(f).max() <= 1e-13


def test_gradient_jump_indicators_positive_for_kinked():
    p1, mesh, space, u_h = solved_p1(nx=2)
    jumps = dwr.gradient_jump_indicators(u_h)
    assert jumps.max() > 0


# ---------------------------------------------------------------------------
# verification-mode linear exactness


def test_linear_exactness_with_reference_dual():
    p1 = prob.get_problem("p1")
    mesh = create_rect_grid(8, 8)
    space = fem.build_space(mesh, 1)
    u_h, _ = dwr.solve_primal(p1, space, tol=1e-14)
    bound = p1.goal.bind(mesh)
    signed, j_h, _ = dwr.estimate_with_reference_dual(p1, bound, u_h,
                                                      refinements=2, degree=2)
    j_ref = bound.apply(lambda x, y: prob.p1_exact(x, y))
    err = j_ref - j_h
    assert abs(signed - err) <= 0.02 * abs(err)


# ---------------------------------------------------------------------------
# the adaptation loop


def test_adapt_loop_bilinear_terminates_level_zero():
    import dataclasses
    p1 = prob.get_problem("p1")
    plin = dataclasses.replace(
        p1, rhs=None,
        dirichlet={t: (lambda x, y: x + y) for t in (1, 2, 3, 4)},
        goal=prob.GoalFunctional.subdomain_mean((0.25, 0.75, 0.25, 0.75)),
        base_mesh=lambda: uniform_refine(create_rect_grid(2, 2), 1))
    table = dwr.adapt_loop(plin, tol=1e-3)
    assert table.status == "tol_reached"
    assert len(table.rows) == 1
    assert table.rows[0].eta <= 1e-10


def test_adapt_loop_p1_reaches_tol():
    p1 = prob.get_problem("p1")
    table = dwr.adapt_loop(p1, tol=1e-4, max_dofs=20000)
    assert table.status == "tol_reached"
    assert len(table.rows) >= 2
    assert table.rows[-1].eta <= 1e-4
    # eta non-increasing after at most every second step
    etas = table.column("eta")
    for k in range(2, len(etas)):
        assert etas[k] <= etas[k - 2] + 1e-15
    # dofs strictly increase, levels strictly increase
    dofs = table.column("n_dofs")
    assert all(b > a for a, b in zip(dofs, dofs[1:]))
    levels = table.column("level")
    assert levels == sorted(set(levels))


def test_adapt_loop_rejects_bad_tol():
    with pytest.raises(UsageError):
        dwr.adapt_loop(prob.get_problem("p1"), tol=-1.0)


def test_adapt_loop_adhoc_strategy_runs():
    p1 = prob.get_problem("p1")
    table = dwr.adapt_loop(p1, tol=1e-9, max_dofs=900,
                           strategy=dwr.MarkingStrategy.adhoc_gradient_jump())
    assert table.status == "max_dofs"
    assert len(table.rows) >= 2


# ---------------------------------------------------------------------------
# the semilinear problem end to end


def test_p3_newton_from_zero_start():
    p3 = prob.get_problem("p3")
    space = fem.build_space(p3.base_mesh(), 1)
    u_h, rep = dwr.solve_primal(p3, space, tol=1e-10)
    assert rep.converged
    assert rep.iterations <= 8
    assert rep.final_residual_norm <= 1e-10
    # quadratic convergence once in the basin
    hist = [h for h in rep.history if h > 1e-13]
    assert hist[-1] <= 1e-3 * hist[-2]


def test_p3_adaptive_effectivity():
    p3 = prob.get_problem("p3")
    ref = prob.reference_value(p3)
    table = dwr.adapt_loop(p3, tol=1e-12, max_dofs=1200, reference=ref,
                           max_levels=5)
    assert table.status == "max_dofs"
    for r in table.rows[1:]:
        assert 0.2 <= r.i_eff <= 3.0
