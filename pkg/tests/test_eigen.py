import numpy as np
import pytest
import scipy.linalg

import dwradapt.eigen as eig
import dwradapt.problems as prob
from dwradapt import fem
from dwradapt.mesh import create_rect_grid, uniform_refine

LAM_EXACT = 2 * np.pi**2


def solve_p4(n=8, tol=1e-10):
    p4 = prob.get_problem("p4")
    mesh = uniform_refine(create_rect_grid(n // 2, n // 2), 1)
    return p4, eig.solve_eigen_pair(p4, mesh, tol=tol)


def test_laplace_eigenvalue_from_above():
    lams = []
    for n in (8, 16, 32):
        _, sol = solve_p4(n)
        lams.append(sol.lambda_h)
        assert sol.lambda_h >= LAM_EXACT
    # monotone convergence toward 2 pi^2 under refinement
    assert lams[0] > lams[1] > lams[2]
    assert lams[2] == pytest.approx(LAM_EXACT, abs=0.02)


def test_normalizations():
    p4, sol = solve_p4(8)
    space = sol.u_h.space
    assert eig.m_inner(space, sol.u_h, sol.u_h) == pytest.approx(1.0, abs=1e-12)
    assert eig.m_inner(space, sol.u_h, sol.z_h) == pytest.approx(1.0, abs=1e-10)
    assert abs(sol.lambda_h - sol.pi_h) <= 1e-9


def test_symmetric_adjoint_equals_primal():
    p4, sol = solve_p4(8)
    assert np.abs(sol.z_h.coefficients - sol.u_h.coefficients).max() <= 1e-9


def test_nonsymmetric_vs_dense_two_sided_oracle():
    p4n = prob.get_problem("p4n")
    mesh = uniform_refine(create_rect_grid(4, 4), 1)
    sol = eig.solve_eigen_pair(p4n, mesh)

    space = fem.build_space(mesh, 1)
    A = fem.assemble_operator(space, p4n.form)
    M = fem.assemble_operator(space, p4n.m_form)
    free = eig._free_dofs(space, p4n.dirichlet)
    Ad = A.submatrix(free).todense()
    Md = M.submatrix(free).todense()
    w, vl, vr = scipy.linalg.eig(Ad, Md, left=True, right=True)
    k = int(np.argmin(np.abs(w - p4n.shift)))
    assert abs(w[k].imag) <= 1e-10
    lam_oracle = w[k].real
    assert sol.lambda_h == pytest.approx(lam_oracle, abs=1e-8)

    # compare eigenvectors up to the module's normalization
    u_oracle = vr[:, k].real
    u_oracle /= np.sqrt(u_oracle @ Md @ u_oracle)
    if u_oracle[np.argmax(np.abs(u_oracle))] < 0:
        u_oracle = -u_oracle
    assert np.abs(sol.u_h.coefficients[free] - u_oracle).max() <= 1e-8
    # left eigenvector of (A, M): scipy's vl satisfies vl^H A = w vl^H M
    z_oracle = vl[:, k].real
    z_oracle /= float(u_oracle @ Md @ z_oracle)
    assert np.abs(sol.z_h.coefficients[free] - z_oracle).max() <= 1e-7


def test_discrete_eigenresidual_orthogonality():
    p4, sol = solve_p4(8)
    space = sol.u_h.space
    rng = np.random.default_rng(4)
    interior = np.setdiff1d(np.arange(space.dof_count), space.boundary_dofs())
    for i in rng.choice(interior, size=5, replace=False):
        e = np.zeros(space.dof_count)
        e[i] = 1.0
        psi = fem.FeFunction(space, e)
        psi.enforce_constraints()
        assert abs(eig.eigen_residual(p4, sol, psi)) <= 1e-9
        assert abs(eig.adjoint_eigen_residual(p4, sol, psi)) <= 1e-9


def test_estimator_halves_coincide_for_symmetric():
    p4, sol = solve_p4(8)
    est = eig.eigen_error_estimate(p4, sol, fem.patch_recover(sol.u_h),
                                   fem.patch_recover(sol.z_h))
    assert est.primal_part == pytest.approx(est.dual_part, abs=1e-10)


def test_estimator_sign_and_effectivity():
    for n in (8, 16, 32):
        p4, sol = solve_p4(n)
        est = eig.eigen_error_estimate(p4, sol, fem.patch_recover(sol.u_h),
                                       fem.patch_recover(sol.z_h))
        err = LAM_EXACT - sol.lambda_h
        # conforming spaces: lambda_h >= lambda, so the signed estimate is
        # negative once it dominates the solver tolerance
        assert est.signed_estimate <= -10 * 1e-10
        i_eff = abs(err) / abs(est.signed_estimate)
        assert 0.5 <= i_eff <= 2.0


def test_resolved_eigenfunction_zero_residuals():
    # 1-dim invariant subspace: a discrete eigenvector used as its own
    # "exact" weight makes both residual terms vanish
    p4, sol = solve_p4(8)
    assert abs(eig.eigen_residual(p4, sol, sol.z_h)) <= 1e-9
    assert abs(eig.adjoint_eigen_residual(p4, sol, sol.u_h)) <= 1e-9


def test_normalization_invariance_under_common_scaling():
    # scaling the a-form and m-form by a common constant changes nothing
    import dataclasses
    p4 = prob.get_problem("p4")
    scaled = dataclasses.replace(p4, form=fem.FormDescriptor.stiffness(4.0),
                                 m_form=fem.FormDescriptor.mass(4.0),
                                 shift=p4.shift)
    mesh = uniform_refine(create_rect_grid(4, 4), 1)
    sol = eig.solve_eigen_pair(p4, mesh)
    sol_s = eig.solve_eigen_pair(scaled, mesh)
    assert sol_s.lambda_h == pytest.approx(sol.lambda_h, abs=1e-12 * abs(sol.lambda_h))
    est = eig.eigen_error_estimate(p4, sol, fem.patch_recover(sol.u_h),
                                   fem.patch_recover(sol.z_h))
    est_s = eig.eigen_error_estimate(scaled, sol_s,
                                     fem.patch_recover(sol_s.u_h),
                                     fem.patch_recover(sol_s.z_h))
    assert est_s.signed_estimate == pytest.approx(est.signed_estimate,
                                                  rel=1e-10)


def test_remainder_identity_with_reference_pair():
    # on a refinement the error representation is exact between computable
    # quantities: (lam_ref - lam_h) - signed_ref equals the remainder
    # 0.5 (lam_ref - lam_h) m(e_u, e_z)
    p4, sol = solve_p4(16)
    fine = uniform_refine(sol.u_h.space.mesh, 2)
    ref_sol = eig.solve_eigen_pair(p4, fine, tol=1e-9, start_from=sol)
    ref_aligned = eig.align_reference(p4, sol, ref_sol)
    signed_ref = 0.5 * eig.eigen_residual(p4, sol, ref_aligned.z_h) \
        + 0.5 * eig.adjoint_eigen_residual(p4, sol, ref_aligned.u_h)
    remainder = eig.eigen_remainder_diagnostic(p4, sol, ref_sol)
    gap = (ref_sol.lambda_h - sol.lambda_h) - signed_ref
    assert gap == pytest.approx(remainder, rel=0.2)
