"""Goal-oriented error estimation and the adaptation loop.

The estimator machinery in three layers:

* the abstract stationary-point error identity (quadratic functional of
  the error plus a cubic remainder), usable on plain arrays;
* weighted primal/dual residuals of a discrete solution, evaluated in
  weak form by quadrature for weights in any space on the same (or a
  refined) mesh;
* strong-form localization to per-cell indicators: cell residuals paired
  with recovered weights plus flux-jump edge residuals, with marking by
  error balancing and the solve-estimate-mark-refine loop on top.

Two edge-term conventions are kept side by side.  Per-cell indicators use
the symmetric half-jump residuals; the signed global estimate sums the
one-sided per-cell integration-by-parts split, which telescopes to the
weak residual exactly (same quadrature), so localization consistency is
checkable to machine precision even across hanging interfaces where the
recovered weight is discontinuous.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fem, linalg
from .errors import UsageError
from .fem import reference
from .mesh import EDGE_NORMALS, refine_with_closure, uniform_refine

# ---------------------------------------------------------------------------
# abstract error identity


@dataclass
class AbstractFunctional:
    """A differentiable functional on R^n.

    ``value(x)``, ``derivative(x, d)`` (linear in d) and optionally
    ``third_derivative(x, d1, d2, d3)`` for remainder evaluation.
    """

    value: object
    derivative: object
    third_derivative: object = None


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def abstract_error_identity(L, x, x_h, y_h, subspace_basis=None):
    """Estimate L(x) - L(x_h) for stationary x, x_h by 0.5 L'(x_h)(x - y_h).

    The identity is exact up to a remainder cubic in e = x - x_h; when the
    third derivative is supplied the remainder

        0.5 * int_0^1 L'''(x_h + s e)(e, e, e) s (s - 1) ds

    is evaluated by 5-point Gauss and returned alongside the estimate.
    ``subspace_basis`` (directions spanning the discrete subspace) enables
    a stationarity check of x_h.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_h = np.atleast_1d(np.asarray(x_h, dtype=float))
    y_h = np.atleast_1d(np.asarray(y_h, dtype=float))
    if subspace_basis is not None:
        scale = 1.0 + abs(float(L.value(x_h)))
        for b in subspace_basis:
            b = np.atleast_1d(np.asarray(b, dtype=float))
            if abs(L.derivative(x_h, b)) > 1e-8 * scale * np.linalg.norm(b):
                raise UsageError("x_h is not stationary in the given subspace")

    estimate = 0.5 * float(L.derivative(x_h, x - y_h))
    remainder = None
    if L.third_derivative is not None:
        e = x - x_h
        s, w = _gauss01(5)
        acc = 0.0
        for si, wi in zip(s, w):
            acc += wi * float(L.third_derivative(x_h + si * e, e, e, e)) * si * (si - 1.0)
        remainder = 0.5 * acc
    return estimate, remainder


def trapezoid_kernel_check(f, f_pp, panels=200):
    """Both sides of the trapezoidal-rule error identity on [0, 1].

    Returns (int f - (f(0)+f(1))/2,  0.5 int f''(s) s (s-1) ds), each by
    composite Simpson.  Self-test of the remainder machinery; the default
    panel count keeps the two sides of smooth test functions together to
    about 1e-10.
    """

    def simpson(fun):
        n = 2 * panels
        s = np.linspace(0.0, 1.0, n + 1)
        y = np.array([float(fun(t)) for t in s])
        h = 1.0 / n
        return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())

    left = simpson(f) - 0.5 * (float(f(0.0)) + float(f(1.0)))
    right = 0.5 * simpson(lambda s: float(f_pp(s)) * s * (s - 1.0))
    return left, right


# ---------------------------------------------------------------------------
# estimates, marking


@dataclass
class ErrorEstimate:
    cell_ids: list
    eta_cells: np.ndarray
    eta_global: float
    signed_estimate: float
    primal_part: float
    dual_part: float = 0.0
    effectivity: float = None
    control_part: float = 0.0

    def __post_init__(self):
        if np.any(self.eta_cells < 0):
            raise AssertionError("indicators must be nonnegative")


@dataclass(frozen=True)
class MarkingStrategy:
    kind: str
    theta: float = 1.0
    fraction: float = 0.3

    @classmethod
    def error_balancing(cls, theta=1.0):
        if theta <= 0:
            raise UsageError("theta must be positive")
        return cls("error_balancing", theta=theta)

    @classmethod
    def fixed_fraction(cls, f):
        if not 0 < f <= 1:
            raise UsageError("fraction must be in (0, 1]")
        return cls("fixed_fraction", fraction=f)

    @classmethod
    def uniform(cls):
        return cls("uniform")

    @classmethod
    def adhoc_gradient_jump(cls):
        return cls("adhoc_gradient_jump")


def effectivity_index(J_ref, J_h, eta):
    """|J_ref - J_h| / eta."""
    if eta <= 0:
        raise UsageError("effectivity needs a positive estimator value")
    return abs(J_ref - J_h) / eta


def mark_cells(estimate, strategy):
    """Cells to refine.  Balancing marks eta_K > theta * eta / N (strict);
    fixed-fraction takes the ceil(f N) largest with ties broken by
    ascending cell id; the ad hoc criterion is a fixed 0.3 fraction applied
    to gradient-jump indicators (supplied by the caller in eta_cells)."""
    eta = estimate.eta_cells
    ids = estimate.cell_ids
    if len(ids) == 0:
        raise UsageError("estimate carries no cells")
    if strategy.kind == "uniform":
        return set(ids)
    if strategy.kind == "error_balancing":
        thr = strategy.theta * estimate.eta_global / len(ids)
        return {cid for cid, e in zip(ids, eta) if e > thr}
    if strategy.kind in ("fixed_fraction", "adhoc_gradient_jump"):
        f = strategy.fraction if strategy.kind == "fixed_fraction" else 0.3
        k = int(np.ceil(f * len(ids)))
        order = sorted(range(len(ids)), key=lambda i: (-eta[i], ids[i]))
        return {ids[i] for i in order[:k]}
    raise UsageError(f"unknown marking strategy {strategy.kind!r}")


# ---------------------------------------------------------------------------
# constant-coefficient structure for the strong form


@dataclass(frozen=True)
class StrongForm:
    nu: float = 0.0
    beta: tuple = (0.0, 0.0)
    react: float = 0.0
    cubic: float = 0.0

    @classmethod
    def from_form(cls, form):
        nu = form.constant("stiffness")
        beta = (0.0, 0.0)
        for t in form.terms:
            if t.kind == "advection":
                if callable(t.coefficient[0]) or callable(t.coefficient[1]):
                    raise UsageError("strong form needs constant advection")
                beta = tuple(float(c) for c in t.coefficient)
        react = form.constant("mass") + form.constant("reaction")
        cubic = form.constant("semilinear_cubic")
        return cls(nu, beta, react, cubic)


# ---------------------------------------------------------------------------
# weak weighted residuals


def _ancestor_map(fine_mesh, coarse_mesh):
    out = {}
    coarse_active = coarse_mesh.active_cells
    for cid in fine_mesh.active_ids:
        a = cid
        while a is not None and a not in coarse_active:
            a = fine_mesh.cells[a].parent
        if a is None:
            raise UsageError("weight mesh is not a refinement of the "
                             "solution mesh")
        out[cid] = a
    return out


def _eval_general(fh, mesh, cells, pts, gradient=False):
    """Evaluate fh at points owned by active cells of `mesh`, which is
    either fh's own mesh or a refinement of it."""
    if fh.space.mesh is mesh:
        return fem.eval_in_cells(fh, cells, pts, gradient=gradient)
    amap = _ancestor_map(mesh, fh.space.mesh)
    anc = np.array([amap[c] for c in cells])
    return fem.eval_in_cells(fh, anc, pts, gradient=gradient)


def weak_residual(form, u_h, weight, subtract=None, rhs=None, neumann=None,
                  rule=3):
    """F(w) - a(u_h)(w) by cell-wise quadrature, w = weight - subtract.

    The weight may live on the same mesh or on a refinement of it (then
    integration runs over the finer mesh).  Vanishes on the discrete test
    space by Galerkin orthogonality (up to solver tolerance).
    """
    mesh_u = u_h.space.mesh
    mesh_w = weight.space.mesh
    mesh = mesh_w if mesh_w is not mesh_u else mesh_u
    if mesh is not mesh_u:
        _ancestor_map(mesh, mesh_u)  # validates nesting

    wspace = weight.space
    sf = StrongForm.from_form(form)
    pts_ref, wts_ref = reference.gauss_2d(rule)
    if weight.space.mesh is mesh:
        wvals, wgrad = fem.batch_eval(weight, pts_ref, gradient=True)
    else:
        raise UsageError("weight must live on the integration mesh")
    rects = wspace.rects
    X = rects[:, 0:1] + pts_ref[None, :, 0] * rects[:, 2:3]
    Y = rects[:, 1:2] + pts_ref[None, :, 1] * rects[:, 3:4]
    W = wts_ref[None, :] * (rects[:, 2] * rects[:, 3])[:, None]

    flat_pts = np.column_stack([X.ravel(), Y.ravel()])
    flat_cells = np.repeat(wspace.active_ids, len(pts_ref))
    shape = X.shape
    if subtract is not None:
        sv, sg = _eval_general(subtract, mesh, flat_cells, flat_pts, gradient=True)
        wvals = wvals - sv.reshape(shape)
        wgrad = wgrad - sg.reshape(shape + (2,))
    uv, ug = _eval_general(u_h, mesh, flat_cells, flat_pts, gradient=True)
    uv = uv.reshape(shape)
    ug = ug.reshape(shape + (2,))

    integrand = -sf.nu * (ug[..., 0] * wgrad[..., 0] + ug[..., 1] * wgrad[..., 1])
    if sf.beta != (0.0, 0.0):
        integrand -= (sf.beta[0] * ug[..., 0] + sf.beta[1] * ug[..., 1]) * wvals
    if sf.react:
        integrand -= sf.react * uv * wvals
    if sf.cubic:
        integrand -= sf.cubic * uv**3 * wvals
    if rhs is not None:
        fv = rhs(X, Y) if callable(rhs) else float(rhs)
        integrand = integrand + fv * wvals
    total = float(np.sum(W * integrand))

    if neumann:
        for tag in sorted(neumann):
            g = neumann[tag]
            for cid, le in fem.boundary_edges(mesh, tag):
                pts_e, wts_e, _ = fem.edge_quadrature(mesh, cid, le, 3)
                cells_e = np.full(len(wts_e), cid)
                wv = _eval_general(weight, mesh, cells_e, pts_e)
                if subtract is not None:
                    wv = wv - _eval_general(subtract, mesh, cells_e, pts_e)
                if isinstance(g, fem.FeFunction):
                    gv = _eval_general(g, mesh, cells_e, pts_e)
                elif callable(g):
                    gv = g(pts_e[:, 0], pts_e[:, 1])
                else:
                    gv = float(g)
                total += float(np.sum(wts_e * gv * wv))
    return total


def weighted_primal_residual(problem, u_h, weight, subtract=None, rule=3):
    """rho(u_h)(w) = F(w) - a(u_h)(w) with the problem's data."""
    return weak_residual(problem.form, u_h, weight, subtract=subtract,
                         rhs=problem.rhs, neumann=problem.neumann, rule=rule)


def weighted_dual_residual(problem, goal, u_h, z_h, weight, subtract=None,
                           rule=3):
    """rho*(z_h)(w) = J'(u_h)(w) - a'(u_h)(w, z_h), linearized at u_h."""
    if weight.space.mesh is not u_h.space.mesh:
        raise UsageError("dual residual weight must live on the solution mesh")
    bound = goal if hasattr(goal, "atoms_for") else goal.bind(u_h.space.mesh)
    sf = StrongForm.from_form(problem.form)
    space = weight.space
    pts_ref, wts_ref = reference.gauss_2d(rule)
    wv, wg = fem.batch_eval(weight, pts_ref, gradient=True)
    if subtract is not None:
        flat_pts, flat_cells, shape = _flat_points(space, pts_ref)
        sv, sg = fem.eval_in_cells(subtract, flat_cells, flat_pts, gradient=True)
        wv = wv - sv.reshape(shape)
        wg = wg - sg.reshape(shape + (2,))
    zv, zg = _batch_on(z_h, space, pts_ref, gradient=True)
    rects = space.rects
    W = wts_ref[None, :] * (rects[:, 2] * rects[:, 3])[:, None]

    integrand = -sf.nu * (wg[..., 0] * zg[..., 0] + wg[..., 1] * zg[..., 1])
    if sf.beta != (0.0, 0.0):
        integrand -= (sf.beta[0] * wg[..., 0] + sf.beta[1] * wg[..., 1]) * zv
    if sf.react:
        integrand -= sf.react * wv * zv
    if sf.cubic:
        uv = _batch_on(u_h, space, pts_ref)
        integrand -= 3.0 * sf.cubic * uv**2 * wv * zv
    total = float(np.sum(W * integrand))

    pts_a, wts_a, cells_a = bound.atoms_for(space.mesh)
    wa = fem.eval_in_cells(weight, cells_a, pts_a)
    if subtract is not None:
        wa = wa - fem.eval_in_cells(subtract, cells_a, pts_a)
    total += float(wts_a @ wa)
    return total


def _flat_points(space, pts_ref):
    rects = space.rects
    X = rects[:, 0:1] + pts_ref[None, :, 0] * rects[:, 2:3]
    Y = rects[:, 1:2] + pts_ref[None, :, 1] * rects[:, 3:4]
    flat = np.column_stack([X.ravel(), Y.ravel()])
    cells = np.repeat(space.active_ids, len(pts_ref))
    return flat, cells, X.shape


def _batch_on(fh, space, pts_ref, gradient=False):
    """batch_eval of fh at another space's quadrature lattice.

    fh may live on the same mesh or on a coarser mesh that `space`'s mesh
    refines (ancestor lookup)."""
    if fh.space is space:
        return fem.batch_eval(fh, pts_ref, gradient=gradient)
    flat, cells, shape = _flat_points(space, pts_ref)
    out = _eval_general(fh, space.mesh, cells, flat, gradient=gradient)
    if gradient:
        return out[0].reshape(shape), out[1].reshape(shape + (2,))
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# strong-form residual split (localization engine)


def _edge_groups(mesh):
    groups = getattr(mesh, "_dwr_edge_groups", None)
    if groups is not None:
        return groups
    conf, fine_h, coarse_h = [], [], []
    bnd = {}
    for (cid, le), rec in sorted(mesh.edge_info.items()):
        kind = rec[0]
        if kind == "conforming":
            a, b = mesh.cell_edge_vertices(cid, le)
            conf.append((cid, le, rec[1], mesh.coords(a), mesh.coords(b)))
        elif kind == "fine_half":
            a, b = mesh.cell_edge_vertices(cid, le)
            fine_h.append((cid, le, rec[1], mesh.coords(a), mesh.coords(b)))
        elif kind == "coarse_hanging":
            (f1, f2), m = rec[1], rec[2]
            a, b = mesh.cell_edge_vertices(cid, le)
            lo, hi = (a, b) if a < b else (b, a)
            coarse_h.append((cid, le, f1, mesh.coords(lo), mesh.coords(m)))
            coarse_h.append((cid, le, f2, mesh.coords(m), mesh.coords(hi)))
        else:
            a, b = mesh.cell_edge_vertices(cid, le)
            bnd.setdefault(rec[1], []).append(
                (cid, le, None, mesh.coords(a), mesh.coords(b)))
    groups = (conf, fine_h, coarse_h, bnd)
    mesh._dwr_edge_groups = groups
    return groups


def _segment_batch(entries, npts=3):
    t, w = _gauss01(npts)
    p0 = np.array([e[3] for e in entries])
    p1 = np.array([e[4] for e in entries])
    pts = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
    lengths = np.hypot(*(p1 - p0).T)
    wts = lengths[:, None] * w[None, :]
    normals = np.array([EDGE_NORMALS[e[1]] for e in entries])
    return pts.reshape(-1, 2), wts, normals


class _WeightPair:
    """recovered - discrete weight, evaluated cell-wise."""

    def __init__(self, hi, lo):
        self.hi = hi
        self.lo = lo

    def at(self, cells, pts):
        v = fem.eval_in_cells(self.hi, cells, pts)
        if self.lo is not None:
            v = v - fem.eval_in_cells(self.lo, cells, pts)
        return v

    def batch(self, space, pts_ref):
        v = _batch_on(self.hi, space, pts_ref)
        if self.lo is not None:
            v = v - _batch_on(self.lo, space, pts_ref)
        return v


def residual_split(problem_sf, field, wpair, *, dual=False, lin_state=None,
                   rhs=None, rhs_field=None, atoms=None, neumann=None,
                   dirichlet_tags=(), rule=3, edge_pts=3):
    """Per-cell split of a weighted residual into strong-form terms.

    Primal orientation (``dual=False``): the residual of `field` as the
    solution of  -nu lap u + beta.grad u + c u + s u^3 = rhs  with the
    given Neumann data; edge residuals are diffusive flux terms.  Dual
    orientation: derivatives and the advective flux move onto `field`
    (transposed operator), goal data enters through `atoms`.

    Returns (onesided, paper): per-active-cell signed contributions.  The
    one-sided edge convention telescopes exactly to the weak residual; the
    half-jump ("paper") convention feeds the per-cell indicators.
    """
    space = field.space
    mesh = space.mesh
    n = len(space.active_ids)
    sf = problem_sf
    pts_ref, wts_ref = reference.gauss_2d(rule)

    vals, grads, lap = fem.batch_eval(field, pts_ref, gradient=True, second=True)
    R = sf.nu * lap
    if sf.beta != (0.0, 0.0):
        adv = sf.beta[0] * grads[..., 0] + sf.beta[1] * grads[..., 1]
        R = R - adv if not dual else R + adv
    if sf.react:
        R -= sf.react * vals
    if sf.cubic:
        if dual:
            uv = _batch_on(lin_state, space, pts_ref)
            R -= 3.0 * sf.cubic * uv**2 * vals
        else:
            R -= sf.cubic * vals**3
    rects = space.rects
    X = rects[:, 0:1] + pts_ref[None, :, 0] * rects[:, 2:3]
    Y = rects[:, 1:2] + pts_ref[None, :, 1] * rects[:, 3:4]
    if rhs is not None:
        R = R + (rhs(X, Y) if callable(rhs) else float(rhs))
    if rhs_field is not None:
        coef, f2 = rhs_field
        R = R + coef * _batch_on(f2, space, pts_ref)
    W = wts_ref[None, :] * (rects[:, 2] * rects[:, 3])[:, None]
    wq = wpair.batch(space, pts_ref)
    cell_terms = np.sum(W * R * wq, axis=1)

    onesided = cell_terms.copy()
    paper = cell_terms.copy()

    if atoms is not None and len(atoms[1]) > 0:
        pts_a, wts_a, cells_a = atoms
        rows = np.array([space.cell_pos[c] for c in cells_a], dtype=np.int64)
        contrib = wts_a * wpair.at(cells_a, pts_a)
        np.add.at(onesided, rows, contrib)
        np.add.at(paper, rows, contrib)

    def flux(cells, pts, normals_rep):
        v, g = fem.eval_in_cells(field, cells, pts, gradient=True)
        fl = sf.nu * (g[:, 0] * normals_rep[:, 0] + g[:, 1] * normals_rep[:, 1])
        if dual and sf.beta != (0.0, 0.0):
            fl += (sf.beta[0] * normals_rep[:, 0] + sf.beta[1] * normals_rep[:, 1]) * v
        return fl

    conf, fine_h, coarse_h, bnd = _edge_groups(mesh)

    def interior(entries):
        if not entries:
            return
        pts, wts, normals = _segment_batch(entries, edge_pts)
        own = np.repeat([e[0] for e in entries], edge_pts)
        nb = np.repeat([e[2] for e in entries], edge_pts)
        nrep = np.repeat(normals, edge_pts, axis=0)
        fl_own = flux(own, pts, nrep)
        fl_nb = flux(nb, pts, nrep)
        wv = wpair.at(own, pts)
        rows = np.array([space.cell_pos[e[0]] for e in entries])
        one = np.sum((wts * (-fl_own * wv).reshape(len(entries), -1)), axis=1)
        pap = np.sum((wts * (-0.5 * (fl_own - fl_nb) * wv).reshape(len(entries), -1)), axis=1)
        np.add.at(onesided, rows, one)
        np.add.at(paper, rows, pap)

    interior(conf)
    interior(fine_h)
    interior(coarse_h)

    neumann = neumann or {}
    for tag, entries in bnd.items():
        if not entries:
            continue
        pts, wts, normals = _segment_batch(entries, edge_pts)
        own = np.repeat([e[0] for e in entries], edge_pts)
        nrep = np.repeat(normals, edge_pts, axis=0)
        fl_own = flux(own, pts, nrep)
        wv = wpair.at(own, pts)
        rows = np.array([space.cell_pos[e[0]] for e in entries])
        if tag in dirichlet_tags:
            one = np.sum((wts * (-fl_own * wv).reshape(len(entries), -1)), axis=1)
            np.add.at(onesided, rows, one)
            continue
        g = neumann.get(tag)
        if g is None or dual:
            resid = -fl_own
        else:
            if isinstance(g, fem.FeFunction):
                gv = fem.eval_in_cells(g, own, pts)
            elif callable(g):
                gv = g(pts[:, 0], pts[:, 1])
            else:
                gv = float(g)
            resid = gv - fl_own
        term = np.sum((wts * (resid * wv).reshape(len(entries), -1)), axis=1)
        np.add.at(onesided, rows, term)
        np.add.at(paper, rows, term)
    return onesided, paper


# ---------------------------------------------------------------------------
# localization, jump indicators


def localize_indicators(problem, goal, u_h, z_h, recovered_z, recovered_u=None,
                        rule=3):
    """Per-cell indicators eta_K from strong residuals and recovered weights.

    With only the dual weight the classical primal-only estimator (factor
    one) is used; when ``recovered_u`` is supplied both halves of the
    symmetric error identity enter with factor one half.  The signed
    estimate sums the exact one-sided split and therefore reproduces the
    weak weighted residual to machine precision.
    """
    if recovered_z is None:
        raise UsageError("localization needs the recovered dual weight")
    if recovered_z.space.mesh is not u_h.space.mesh:
        raise UsageError("recovered weight lives on a different mesh")
    bound = goal if hasattr(goal, "atoms_for") else goal.bind(u_h.space.mesh)
    sf = StrongForm.from_form(problem.form)
    dtags = set(problem.dirichlet)

    w_z = _WeightPair(recovered_z, z_h)
    one_p, pap_p = residual_split(sf, u_h, w_z, dual=False, rhs=problem.rhs,
                                  neumann=problem.neumann,
                                  dirichlet_tags=dtags, rule=rule)
    if recovered_u is not None:
        w_u = _WeightPair(recovered_u, u_h)
        one_d, pap_d = residual_split(sf, z_h, w_u, dual=True, lin_state=u_h,
                                      atoms=bound.atoms_for(u_h.space.mesh),
                                      dirichlet_tags=dtags, rule=rule)
        eta_cells = np.abs(0.5 * pap_p + 0.5 * pap_d)
        primal_part = 0.5 * float(one_p.sum())
        dual_part = 0.5 * float(one_d.sum())
        signed = primal_part + dual_part
    else:
        eta_cells = np.abs(pap_p)
        primal_part = float(one_p.sum())
        dual_part = 0.0
        signed = primal_part
    return ErrorEstimate(list(u_h.space.active_ids), eta_cells,
                         float(eta_cells.sum()), signed, primal_part, dual_part)


def gradient_jump_indicators(u_h):
    """Ad hoc smoothness indicator: per cell, the integrated absolute
    normal-derivative jump over its edges."""
    space = u_h.space
    mesh = space.mesh
    out = np.zeros(len(space.active_ids))
    conf, fine_h, coarse_h, _ = _edge_groups(mesh)

    def add(entries):
        if not entries:
            return
        pts, wts, normals = _segment_batch(entries, 2)
        own = np.repeat([e[0] for e in entries], 2)
        nb = np.repeat([e[2] for e in entries], 2)
        nrep = np.repeat(normals, 2, axis=0)
        _, g_own = fem.eval_in_cells(u_h, own, pts, gradient=True)
        _, g_nb = fem.eval_in_cells(u_h, nb, pts, gradient=True)
        jump = (g_own[:, 0] - g_nb[:, 0]) * nrep[:, 0] + \
               (g_own[:, 1] - g_nb[:, 1]) * nrep[:, 1]
        rows = np.array([space.cell_pos[e[0]] for e in entries])
        np.add.at(out, rows, np.sum(wts * np.abs(jump).reshape(len(entries), -1),
                                    axis=1))

    add(conf)
    add(fine_h)
    add(coarse_h)
    return out


# ---------------------------------------------------------------------------
# discrete solves


def solve_primal(problem, space, tol=1e-12):
    """Primal solve: CG/GMRES for linear problems, damped Newton else."""
    if not problem.nonlinear:
        A = fem.assemble_operator(space, problem.form)
        b = fem.assemble_load(space, problem.rhs, problem.neumann, rule=3)
        A, b = fem.apply_dirichlet(A, b, space, problem.dirichlet)
        if problem.symmetric:
            x, rep = linalg.solve_cg(A, b, tol=tol)
        else:
            x, rep = linalg.solve_gmres(A, b, tol=tol,
                                        restart=min(space.dof_count, 200),
                                        jacobi=True)
        u = fem.FeFunction(space, x)
        u.enforce_constraints()
        return u, rep

    linear_terms = fem.FormDescriptor(tuple(
        t for t in problem.form.terms if t.kind != "semilinear_cubic"))
    cubic = problem.form.constant("semilinear_cubic")
    K = fem.assemble_operator(space, linear_terms)
    b = fem.assemble_load(space, problem.rhs, problem.neumann, rule=3)
    ddofs, gvals = fem.dirichlet_dofs_and_values(space, problem.dirichlet)
    cmask = space.constrained_mask()

    def residual(x):
        xc = fem.enforce_constraints(space, x.copy())
        u = fem.FeFunction(space, xc)
        r = (K @ xc) + fem.assemble_semilinear_vector(space, u, cubic) - b
        r[ddofs] = xc[ddofs] - gvals
        r[cmask] = 0.0
        return r

    def jacobian(x):
        xc = fem.enforce_constraints(space, x.copy())
        J = fem.assemble_operator(space, problem.form,
                                  linearization_point=fem.FeFunction(space, xc))
        J, _ = fem.apply_dirichlet(J, np.zeros(space.dof_count), space,
                                   {t: 0.0 for t in problem.dirichlet})
        return J

    x0 = np.zeros(space.dof_count)
    x0[ddofs] = gvals

    def lin(J, r):
        return linalg.solve_cg(J, r, tol=1e-13) if problem.symmetric else \
            linalg.solve_gmres(J, r, tol=1e-13,
                               restart=min(space.dof_count, 200), jacobi=True)

    x, rep = linalg.newton_solve(residual, jacobian, x0, tol=tol, linear_solver=lin)
    u = fem.FeFunction(space, fem.enforce_constraints(space, x))
    return u, rep


def solve_dual(problem, goal, space, u_h=None, tol=1e-12):
    """Discrete dual solve: transposed linearized operator, goal derivative
    as data, homogeneous Dirichlet conditions."""
    bound = goal if hasattr(goal, "atoms_for") else goal.bind(space.mesh)
    A = fem.assemble_operator(space, problem.form, linearization_point=u_h)
    Ad = A.transpose()
    rhs = bound.vector(space)
    Ad, rhs = fem.apply_dirichlet(Ad, rhs, space,
                                  {t: 0.0 for t in problem.dirichlet})
    if problem.symmetric:
        x, rep = linalg.solve_cg(Ad, rhs, tol=tol)
    else:
        x, rep = linalg.solve_gmres(Ad, rhs, tol=tol,
                                    restart=min(space.dof_count, 200),
                                    jacobi=True)
    z = fem.FeFunction(space, x)
    z.enforce_constraints()
    return z, rep


def dual_operator(problem, space, u_h=None, with_bcs=True):
    """The assembled dual (transposed) operator, for inspection and tests."""
    A = fem.assemble_operator(space, problem.form, linearization_point=u_h)
    Ad = A.transpose()
    if with_bcs:
        Ad, _ = fem.apply_dirichlet(Ad, np.zeros(space.dof_count), space,
                                    {t: 0.0 for t in problem.dirichlet})
    return Ad


def estimate_with_reference_dual(problem, goal, u_h, refinements=2, degree=2,
                                 tol=1e-13):
    """Verification-mode estimate: dual solved on a uniformly refined
    higher-order space, weight = fine dual minus its coarse interpolant.

    For linear problems and goals the result reproduces J(u) - J(u_h) up
    to the (higher-order) discretization error of the fine dual.
    """
    bound = goal if hasattr(goal, "atoms_for") else goal.bind(u_h.space.mesh)
    fine_mesh = uniform_refine(u_h.space.mesh, refinements)
    fs = fem.build_space(fine_mesh, degree)
    lin = fem.interpolate_function(fs, u_h) if problem.nonlinear else None
    A = fem.assemble_operator(fs, problem.form, linearization_point=lin)
    Ad = A.transpose()
    rhs = bound.vector(fs)
    Ad, rhs = fem.apply_dirichlet(Ad, rhs, fs, {t: 0.0 for t in problem.dirichlet})
    if problem.symmetric:
        x, rep = linalg.solve_cg(Ad, rhs, tol=tol)
    else:
        x, rep = linalg.solve_gmres(Ad, rhs, tol=tol,
                                    restart=min(fs.dof_count, 300), jacobi=True)
    z_fine = fem.FeFunction(fs, x)
    z_fine.enforce_constraints()
    psi = fem.interpolate_function(u_h.space, z_fine)
    signed = weighted_primal_residual(problem, u_h, z_fine, subtract=psi)
    return signed, bound.apply(u_h), z_fine


# ---------------------------------------------------------------------------
# adaptation loop


@dataclass
class TableRow:
    level: int
    n_dofs: int
    n_cells: int
    j_h: float
    eta: float
    signed_estimate: float
    i_eff: float = None
    wall_time_s: float = 0.0


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)
    status: str = "max_levels"
    problem: str = ""

    def column(self, name):
        return [getattr(r, name) for r in self.rows]


def adapt_loop(problem, tol, strategy=None, max_dofs=20000, goal=None,
               reference=None, solver_tol=1e-12, max_levels=40):
    """Solve-estimate-mark-refine until eta <= tol or the dof budget is hit.

    Records one table row per level; a failed inner solve aborts with the
    partial table and status 'failed'.
    """
    if tol <= 0:
        raise UsageError("tol must be positive")
    strategy = strategy or MarkingStrategy.error_balancing()
    goal = goal or problem.goal
    mesh = problem.base_mesh()
    table = ConvergenceTable(problem=problem.name)

    for level in range(max_levels):
        t0 = time.perf_counter()
        space = fem.build_space(mesh, 1)
        bound = goal.bind(mesh)
        u_h, rep = solve_primal(problem, space, tol=solver_tol)
        if not rep.converged:
            table.status = "failed"
            break
        z_h, repd = solve_dual(problem, bound, space, u_h=u_h, tol=solver_tol)
        if not repd.converged:
            table.status = "failed"
            break
        rec_z = fem.patch_recover(z_h)
        rec_u = fem.patch_recover(u_h)
        est = localize_indicators(problem, bound, u_h, z_h, rec_z, rec_u)
        j_h = bound.apply(u_h)
        i_eff = None
        if reference is not None and est.eta_global > 0:
            i_eff = effectivity_index(reference, j_h, est.eta_global)
        table.rows.append(TableRow(level, space.dof_count,
                                   len(space.active_ids), j_h,
                                   est.eta_global, est.signed_estimate, i_eff,
                                   time.perf_counter() - t0))
        if est.eta_global <= tol:
            table.status = "tol_reached"
            break
        if space.dof_count > max_dofs:
            table.status = "max_dofs"
            break
        if strategy.kind == "adhoc_gradient_jump":
            jumps = gradient_jump_indicators(u_h)
            jump_est = ErrorEstimate(list(space.active_ids), jumps,
                                     float(jumps.sum()), 0.0, 0.0)
            marked = mark_cells(jump_est, strategy)
        else:
            marked = mark_cells(est, strategy)
        if not marked:
            # perfectly balanced indicators: force progress on the largest
            marked = {space.active_ids[int(np.argmax(est.eta_cells))]}
        mesh = refine_with_closure(mesh, marked)
    return table
