"""Generalized eigenvalue problems with simultaneous primal/adjoint pairs.

The discrete pair is computed by shift-invert inverse iteration on the
reduced (Dirichlet- and constraint-free) matrices, once for the operator
and once for its transpose.  Normalizations: m(u_h, u_h) = 1 with a
deterministic sign, m(u_h, z_h) = 1.  The eigenvalue error estimate sums
the eigenresidual weighted with the recovered adjoint and the adjoint
eigenresidual weighted with the recovered primal, each with factor one
half; the remainder (second order in the errors) is available as a
diagnostic against a fine-mesh reference pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem, linalg
from .dwr import ErrorEstimate, StrongForm, _WeightPair, residual_split
from .errors import NormalizationError, SolverError
from .fem import reference


@dataclass
class EigenSolution:
    lambda_h: float
    u_h: fem.FeFunction
    pi_h: float
    z_h: fem.FeFunction


def _free_dofs(space, dirichlet):
    bdofs, _ = fem.dirichlet_dofs_and_values(space, dirichlet)
    mask = np.ones(space.dof_count, dtype=bool)
    mask[bdofs] = False
    mask[space.constrained_mask()] = False
    return np.nonzero(mask)[0]


def solve_eigen_pair(problem, mesh, shift=None, tol=1e-10, degree=1,
                     start_from=None):
    """Primal and adjoint discrete eigenpairs nearest the shift.

    ``start_from`` (an EigenSolution on a coarser mesh) warm-starts the
    inverse iterations with interpolated eigenvectors.
    """
    shift = problem.shift if shift is None else shift
    space = fem.build_space(mesh, degree)
    A = fem.assemble_operator(space, problem.form)
    M = fem.assemble_operator(space, problem.m_form)
    free = _free_dofs(space, problem.dirichlet)
    Af = A.submatrix(free)
    Mf = M.submatrix(free)
    restart = min(len(free), 1000)
    start_u = start_z = None
    if start_from is not None:
        start_u = fem.interpolate_function(space, start_from.u_h).coefficients[free]
        start_z = fem.interpolate_function(space, start_from.z_h).coefficients[free]

    lam, v, rep = linalg.eigen_pair(Af, Mf, shift, adjoint=False, tol=tol,
                                    restart=restart, start=start_u)
    if not rep.converged:
        raise SolverError("primal eigen iteration did not converge", report=rep)
    pi, zv, repz = linalg.eigen_pair(Af, Mf, shift, adjoint=True, tol=tol,
                                     restart=restart, start=start_z)
    if not repz.converged:
        raise SolverError("adjoint eigen iteration did not converge",
                          report=repz)
    if abs(lam - pi) > 1e-9 * max(1.0, abs(lam)):
        raise SolverError(
            f"primal/adjoint eigenvalues disagree: {lam} vs {pi}")

    v = v / np.sqrt(float(v @ (Mf @ v)))
    s = float(v @ (Mf @ zv))
    if abs(s) < 1e-10 * float(np.linalg.norm(zv)):
        raise NormalizationError(
            "m(u_h, z_h) vanishes; eigenpair defective or ill-conditioned")
    zv = zv / s

    def embed(vec):
        full = np.zeros(space.dof_count)
        full[free] = vec
        f = fem.FeFunction(space, full)
        f.enforce_constraints()
        return f

    return EigenSolution(lam, embed(v), pi, embed(zv))


def eigen_residual(problem, sol, weight, subtract=None):
    """rho(u_h, lambda_h)(w) = a(u_h, w) - lambda_h m(u_h, w) by quadrature."""
    return _eigen_weak(problem, sol.u_h, sol.lambda_h, weight, subtract,
                       adjoint=False)


def adjoint_eigen_residual(problem, sol, weight, subtract=None):
    """rho*(z_h, pi_h)(w) = a(w, z_h) - pi_h m(w, z_h) by quadrature."""
    return _eigen_weak(problem, sol.z_h, sol.pi_h, weight, subtract,
                       adjoint=True)


def _eigen_weak(problem, field, lam, weight, subtract, adjoint):
    sf = StrongForm.from_form(problem.form)
    mcoef = problem.m_form.constant("mass") + problem.m_form.constant("reaction")
    space = weight.space
    pts_ref, wts_ref = reference.gauss_2d(3)
    wv, wg = fem.batch_eval(weight, pts_ref, gradient=True)
    if subtract is not None:
        sv, sg = _on_lattice(subtract, space, pts_ref)
        wv = wv - sv
        wg = wg - sg
    fv, fg = _on_lattice(field, space, pts_ref)
    rects = space.rects
    W = wts_ref[None, :] * (rects[:, 2] * rects[:, 3])[:, None]
    diff = sf.nu * (fg[..., 0] * wg[..., 0] + fg[..., 1] * wg[..., 1])
    if sf.beta != (0.0, 0.0):
        if adjoint:
            diff += (sf.beta[0] * wg[..., 0] + sf.beta[1] * wg[..., 1]) * fv
        else:
            diff += (sf.beta[0] * fg[..., 0] + sf.beta[1] * fg[..., 1]) * wv
    if sf.react:
        diff += sf.react * fv * wv
    return float(np.sum(W * (diff - lam * mcoef * fv * wv)))


def _on_lattice(fh, space, pts_ref):
    from .dwr import _batch_on

    return _batch_on(fh, space, pts_ref, gradient=True)


def eigen_error_estimate(problem, sol, recovered_u, recovered_z, rule=3):
    """Eigenvalue error estimate with recovered weights.

    signed = 0.5 rho(u_h, lambda_h)(w_z) + 0.5 rho*(z_h, pi_h)(w_u); the
    second-order remainder is never added (see eigen_remainder_diagnostic).
    Per-cell indicators localize both halves in strong form.
    """
    sf = StrongForm.from_form(problem.form)
    mcoef = problem.m_form.constant("mass") + problem.m_form.constant("reaction")
    dtags = set(problem.dirichlet)
    w_z = _WeightPair(recovered_z, sol.z_h)
    w_u = _WeightPair(recovered_u, sol.u_h)
    # the engine computes lam*m(u_h, w) - a(u_h, w) = -rho
    one_p, pap_p = residual_split(sf, sol.u_h, w_z, dual=False,
                                  rhs_field=(sol.lambda_h * mcoef, sol.u_h),
                                  dirichlet_tags=dtags, rule=rule)
    one_d, pap_d = residual_split(sf, sol.z_h, w_u, dual=True,
                                  rhs_field=(sol.pi_h * mcoef, sol.z_h),
                                  dirichlet_tags=dtags, rule=rule)
    primal_part = -0.5 * float(one_p.sum())
    dual_part = -0.5 * float(one_d.sum())
    eta_cells = np.abs(0.5 * pap_p + 0.5 * pap_d)
    return ErrorEstimate(list(sol.u_h.space.active_ids), eta_cells,
                         float(eta_cells.sum()), primal_part + dual_part,
                         primal_part, dual_part)


def m_inner(space, f, g, mcoef=1.0, rule=3):
    """m(f, g) over the active cells of `space`'s mesh by quadrature."""
    from .dwr import _batch_on

    pts_ref, wts_ref = reference.gauss_2d(rule)
    fv = _batch_on(f, space, pts_ref)
    gv = _batch_on(g, space, pts_ref)
    rects = space.rects
    W = wts_ref[None, :] * (rects[:, 2] * rects[:, 3])[:, None]
    return float(np.sum(W * mcoef * fv * gv))


def align_reference(problem, sol, ref_sol):
    """Flip the reference pair so both pairs share the sign convention.

    (u, z) and (-u, -z) satisfy the same normalizations; the diagnostic
    remainder needs the pair matching the coarse one.
    """
    space = ref_sol.u_h.space
    mcoef = problem.m_form.constant("mass") + problem.m_form.constant("reaction")
    u_c = fem.interpolate_function(space, sol.u_h)
    if m_inner(space, u_c, ref_sol.u_h, mcoef) < 0:
        flip_u = fem.FeFunction(ref_sol.u_h.space, -ref_sol.u_h.coefficients)
        flip_z = fem.FeFunction(ref_sol.z_h.space, -ref_sol.z_h.coefficients)
        return EigenSolution(ref_sol.lambda_h, flip_u, ref_sol.pi_h, flip_z)
    return ref_sol


def eigen_remainder_diagnostic(problem, sol, ref_sol):
    """The neglected remainder 0.5 (lam - lam_h) m(u - u_h, z - z_h),
    evaluated with a fine-mesh reference pair standing in for the exact
    one.  ``ref_sol`` must live on a refinement of the solution mesh."""
    ref_sol = align_reference(problem, sol, ref_sol)
    space = ref_sol.u_h.space
    mcoef = problem.m_form.constant("mass") + problem.m_form.constant("reaction")
    u_c = fem.interpolate_function(space, sol.u_h)
    z_c = fem.interpolate_function(space, sol.z_h)
    e_u = fem.FeFunction(space, ref_sol.u_h.coefficients - u_c.coefficients)
    e_z = fem.FeFunction(space, ref_sol.z_h.coefficients - z_c.coefficients)
    return 0.5 * (ref_sol.lambda_h - sol.lambda_h) * m_inner(space, e_u, e_z,
                                                             mcoef)
