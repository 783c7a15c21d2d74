"""Linear-state, quadratic-cost boundary control and its error estimator.

State equation -lap u + u = f with Neumann flux control on a tagged
boundary part, tracking-type cost over an observation region plus a
Tikhonov term on the control.  The coupled first-order optimality system
(state, adjoint, gradient equation) is assembled once and solved
monolithically by GMRES; a reduced-space CG path on the control Hessian
exists for high-resolution reference solves.

The cost-error estimator combines the three weighted optimality residuals
using only the computed triple (state, control, adjoint) and recovered
weights; it performs no additional linear solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem, linalg
from .dwr import ErrorEstimate, StrongForm, _WeightPair, residual_split
from .errors import SolverError, UsageError
from .fem import reference


@dataclass(frozen=True)
class ControlProblem:
    state_form: fem.FormDescriptor
    control_tag: int
    alpha: float
    observation: tuple          # (x0, x1, y0, y1)
    target: object              # callable u_hat(x, y)
    rhs: object = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise UsageError("regularization alpha must be positive")


@dataclass
class ControlTrace:
    """Trace of the volume space on the control boundary."""

    space: fem.FeSpace
    tag: int
    dofs: np.ndarray            # volume dof ids, ordered along the boundary
    edges: list                 # (cid, local_edge) pairs

    def __post_init__(self):
        self.index = {int(d): i for i, d in enumerate(self.dofs)}

    def __len__(self):
        return len(self.dofs)


@dataclass
class ControlFunction:
    trace: ControlTrace
    values: np.ndarray

    def as_volume_function(self):
        """Volume function whose boundary trace equals this control."""
        v = np.zeros(self.trace.space.dof_count)
        v[self.trace.dofs] = self.values
        return fem.FeFunction(self.trace.space, v)

    def norm2(self):
        """L2 norm on the control boundary."""
        Mc = control_mass(self.trace)
        return float(np.sqrt(self.values @ (Mc @ self.values)))


@dataclass
class KktSolution:
    u_h: fem.FeFunction
    q_h: ControlFunction
    z_h: fem.FeFunction
    cost: float
    report: linalg.SolverReport = None


def build_trace(space, tag):
    edges = fem.boundary_edges(space.mesh, tag)
    if not edges:
        raise UsageError(f"no boundary edges carry control tag {tag}")
    dofs = space.boundary_dofs({tag})
    pts = space.dof_points[dofs]
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    return ControlTrace(space, tag, dofs[order], edges)


def _edge_basis(space, cid, le, npts=3):
    pts, wts, _ = fem.edge_quadrature(space.mesh, cid, le, npts)
    row = space.cell_pos[cid]
    rect = space.rects[row]
    loc = np.column_stack([(pts[:, 0] - rect[0]) / rect[2],
                           (pts[:, 1] - rect[1]) / rect[3]])
    N, _, _ = reference.tabulate(space.degree, loc)
    return pts, wts, N, space.cell_dofs[row]


def control_coupling(trace):
    """B with entries (chi_j, phi_i) on the control boundary (V x Q)."""
    space = trace.space
    rows, cols, vals = [], [], []
    for cid, le in trace.edges:
        _, wts, N, cdofs = _edge_basis(space, cid, le)
        for jloc, dj in enumerate(cdofs):
            j = trace.index.get(int(dj))
            if j is None:
                continue
            for iloc, di in enumerate(cdofs):
                rows.append(int(di))
                cols.append(j)
                vals.append(float(np.sum(wts * N[:, iloc] * N[:, jloc])))
    return linalg.SparseMatrix.from_coo(rows, cols, vals,
                                        (space.dof_count, len(trace)))


def control_mass(trace):
    space = trace.space
    rows, cols, vals = [], [], []
    for cid, le in trace.edges:
        _, wts, N, cdofs = _edge_basis(space, cid, le)
        idx = [(loc, trace.index[int(d)]) for loc, d in enumerate(cdofs)
               if int(d) in trace.index]
        for iloc, i in idx:
            for jloc, j in idx:
                rows.append(i)
                cols.append(j)
                vals.append(float(np.sum(wts * N[:, iloc] * N[:, jloc])))
    return linalg.SparseMatrix.from_coo(rows, cols, vals,
                                        (len(trace), len(trace)))


def _obs_indicator(cp):
    xa, xb, ya, yb = cp.observation

    def ind(X, Y):
        return ((X >= xa) & (X <= xb) & (Y >= ya) & (Y <= yb)).astype(float)

    return ind


def _assemble_blocks(cp, space):
    ind = _obs_indicator(cp)
    A = fem.assemble_operator(space, cp.state_form, constrained_diag=0.0)
    Mo = fem.assemble_operator(space, fem.FormDescriptor.mass(ind),
                               constrained_diag=0.0, rule=3)
    t = fem.assemble_load(space, lambda X, Y: ind(X, Y) * cp.target(X, Y), rule=3)
    F = fem.assemble_load(space, cp.rhs, rule=3) if cp.rhs is not None \
        else np.zeros(space.dof_count)
    trace = build_trace(space, cp.control_tag)
    B = control_coupling(trace)
    Mc = control_mass(trace)
    return A, Mo, t, F, trace, B, Mc


def cost_value(cp, u_h, q):
    """J(u, q) = 0.5 ||u - u_hat||^2 on the observation region plus
    0.5 alpha ||q||^2 on the control boundary."""
    space = u_h.space
    pts_ref, wts_ref = reference.gauss_2d(3)
    vals = fem.batch_eval(u_h, pts_ref)
    rects = space.rects
    X = rects[:, 0:1] + pts_ref[None, :, 0] * rects[:, 2:3]
    Y = rects[:, 1:2] + pts_ref[None, :, 1] * rects[:, 3:4]
    W = wts_ref[None, :] * (rects[:, 2] * rects[:, 3])[:, None]
    diff = (vals - cp.target(X, Y)) * _obs_indicator(cp)(X, Y)
    track = 0.5 * float(np.sum(W * diff**2))
    return track + 0.5 * cp.alpha * q.norm2() ** 2


def solve_kkt(cp, mesh, tol=1e-12, degree=1):
    """Monolithic GMRES solve of the symmetric-indefinite optimality system.

    Unknown layout (u, q, ztilde) with ztilde = -z (z the adjoint in the
    optimality-condition sign convention); all three discrete residual
    blocks of the returned triple vanish to solver tolerance.
    """
    space = fem.build_space(mesh, degree)
    A, Mo, t, F, trace, B, Mc = _assemble_blocks(cp, space)
    n, m = space.dof_count, len(trace)
    dim = 2 * n + m

    rows, cols, vals = [], [], []

    def put(M, roff, coff, scale=1.0):
        r = np.repeat(np.arange(M.shape[0], dtype=np.int64), np.diff(M.indptr))
        rows.append(r + roff)
        cols.append(M.indices + coff)
        vals.append(scale * M.data)

    put(Mo, 0, 0)
    put(A, 0, n + m)
    put(A, n + m, 0)
    put(Mc, n, n, cp.alpha)
    put(B.transpose(), n, n + m, -1.0)
    put(B, n + m, n, -1.0)
    cdofs = np.nonzero(space.constrained_mask())[0]
    if cdofs.size:
        for off in (0, n + m):
            rows.append(cdofs + off)
            cols.append(cdofs + off)
            vals.append(np.ones(cdofs.size))
    K = linalg.SparseMatrix.from_coo(np.concatenate(rows), np.concatenate(cols),
                                     np.concatenate(vals), (dim, dim))
    rhs = np.concatenate([t, np.zeros(m), F])
    x, rep = linalg.solve_gmres(K, rhs, tol=tol, restart=min(dim, 2000),
                                max_iter=200 * dim)
    if not rep.converged:
        raise SolverError("KKT solve did not converge", report=rep)

    u = fem.FeFunction(space, x[:n].copy())
    u.enforce_constraints()
    q = ControlFunction(trace, x[n:n + m].copy())
    z = fem.FeFunction(space, -x[n + m:].copy())
    z.enforce_constraints()
    return KktSolution(u, q, z, cost_value(cp, u, q), rep)


class _Hessian:
    """Reduced control Hessian alpha Mc + B^T A^-1 Mo A^-1 B (matrix-free)."""

    def __init__(self, A, Mo, B, Mc, alpha, tol):
        self.A, self.Mo, self.B, self.Mc = A, Mo, B, Mc
        self.alpha = alpha
        self.tol = tol
        self.shape = (Mc.shape[0], Mc.shape[0])

    def _state(self, rhs):
        x, rep = linalg.solve_cg(self.A, rhs, tol=self.tol)
        if not rep.converged:
            raise SolverError("inner state solve failed", report=rep)
        return x

    def __matmul__(self, q):
        u = self._state(self.B @ q)
        w = self._state(self.Mo @ u)
        return self.alpha * (self.Mc @ q) + self.B.rmatvec(w)

    def diagonal(self):
        return np.ones(self.shape[0])


def solve_kkt_reduced(cp, mesh, degree=2, tol=1e-11):
    """Reference-quality KKT solve: CG on the reduced control Hessian,
    with CG state/adjoint solves inside (SPD throughout)."""
    space = fem.build_space(mesh, degree)
    A, Mo, t, F, trace, B, Mc = _assemble_blocks(cp, space)
    # restore solvable constrained rows for the SPD solves
    cdofs = np.nonzero(space.constrained_mask())[0]
    if cdofs.size:
        eye = linalg.SparseMatrix.from_coo(cdofs, cdofs, np.ones(cdofs.size),
                                           A.shape)
        A = A + eye
    H = _Hessian(A, Mo, B, Mc, cp.alpha, tol=0.01 * tol)
    uf = H._state(F)
    rhs_red = B.rmatvec(H._state(t - (Mo @ uf)))
    qv, rep = linalg.solve_cg(H, rhs_red, tol=tol, max_iter=10 * len(trace) + 200)
    if not rep.converged:
        raise SolverError("reduced KKT solve did not converge", report=rep)
    u = fem.FeFunction(space, H._state(F + (B @ qv)))
    u.enforce_constraints()
    zt = H._state(t - (Mo @ u.coefficients))
    z = fem.FeFunction(space, -zt)
    z.enforce_constraints()
    q = ControlFunction(trace, qv)
    return KktSolution(u, q, z, cost_value(cp, u, q), rep)


def reduced_gradient(cp, mesh, qv=None, degree=1, tol=1e-12):
    """Gradient of the reduced cost at a given control (state and adjoint
    re-solved): g = alpha Mc q + B^T z.  Returns (g, J, u_h, z_h)."""
    space = fem.build_space(mesh, degree)
    A, Mo, t, F, trace, B, Mc = _assemble_blocks(cp, space)
    cdofs = np.nonzero(space.constrained_mask())[0]
    if cdofs.size:
        A = A + linalg.SparseMatrix.from_coo(cdofs, cdofs,
                                             np.ones(cdofs.size), A.shape)
    if qv is None:
        qv = np.zeros(len(trace))
    uvec, rep1 = linalg.solve_cg(A, F + (B @ qv), tol=tol)
    ztv, rep2 = linalg.solve_cg(A, t - (Mo @ uvec), tol=tol)
    if not (rep1.converged and rep2.converged):
        raise SolverError("state/adjoint solve failed")
    g = cp.alpha * (Mc @ qv) - B.rmatvec(ztv)
    u = fem.FeFunction(space, uvec)
    u.enforce_constraints()
    z = fem.FeFunction(space, -ztv)
    z.enforce_constraints()
    q = ControlFunction(trace, qv)
    return g, cost_value(cp, u, q), u, z


# ---------------------------------------------------------------------------
# 1D recovery of the control trace


class ControlRecovery:
    """Patch-quadratic reconstruction of the control along its boundary.

    On each pair of sibling boundary edges (halves of one parent edge) the
    three nodal values define a quadratic; edges without an intact sibling
    pair keep the piecewise-linear trace (zero recovery weight).
    """

    def __init__(self, q):
        trace = q.trace
        space = trace.space
        mesh = space.mesh
        qvol = q.as_volume_function()
        edge_keys = {tuple(sorted(mesh.cell_edge_vertices(c, e)))
                     for c, e in trace.edges}
        vdof = space.entity_dofs
        self._parab = {}
        for cid, le in trace.edges:
            a, b = mesh.cell_edge_vertices(cid, le)
            mid = parent = None
            for v, other in ((a, b), (b, a)):
                pk = mesh.midpoint_parent.get(v)
                if pk is not None and other in pk:
                    parent, mid = pk, v
                    break
            if parent is None:
                continue
            p, r = parent
            sibling = tuple(sorted((mid, r if {a, b} == {p, mid} else p)))
            if sibling not in edge_keys:
                continue
            vals = np.array([qvol.coefficients[vdof[("v", w)]]
                             for w in (p, mid, r)])
            self._parab[(cid, le)] = (np.array(mesh.coords(p)),
                                      np.array(mesh.coords(r)), vals)
        self.q = q
        self.qvol = qvol

    def weight_at(self, cid, le, pts):
        """(recovered - trace) evaluated at points on the given edge."""
        rec = self._parab.get((cid, le))
        base = fem.eval_in_cells(self.qvol, np.full(len(pts), cid), pts)
        if rec is None:
            return np.zeros(len(pts))
        p0, p1, vals = rec
        seg = p1 - p0
        s = ((pts - p0) @ seg) / float(seg @ seg)
        quad = (vals[0] * (2 * s * s - 3 * s + 1) + vals[1] * (4 * s - 4 * s * s)
                + vals[2] * (2 * s * s - s))
        return quad - base


def recover_control(q):
    return ControlRecovery(q)


# ---------------------------------------------------------------------------
# the Proposition-3 estimator


def control_error_estimate(cp, sol, recovered_u, recovered_q, recovered_z,
                           rule=3):
    """Cost-error estimate from the three weighted optimality residuals.

    signed = 0.5 [rho*(z_h)(w_u) + rho^q(q_h)(w_q) + rho(u_h)(w_z)] with
    recovered-minus-discrete weights; per-cell indicators take the state
    and adjoint terms, control-edge contributions are folded into the
    adjacent cells.  Uses only the computed triple: no linear solves.
    """
    space = sol.u_h.space
    mesh = space.mesh
    sf = StrongForm.from_form(cp.state_form)
    qvol = sol.q_h.as_volume_function()

    w_z = _WeightPair(recovered_z, sol.z_h)
    one_s, pap_s = residual_split(sf, sol.u_h, w_z, dual=False, rhs=cp.rhs,
                                  neumann={cp.control_tag: qvol}, rule=rule)

    # adjoint residual: observation mismatch as atom cloud
    ind = _obs_indicator(cp)
    pts_ref, wts_ref = reference.gauss_2d(3)
    uv = fem.batch_eval(sol.u_h, pts_ref)
    rects = space.rects
    X = rects[:, 0:1] + pts_ref[None, :, 0] * rects[:, 2:3]
    Y = rects[:, 1:2] + pts_ref[None, :, 1] * rects[:, 3:4]
    W = wts_ref[None, :] * (rects[:, 2] * rects[:, 3])[:, None]
    aw = (W * (uv - cp.target(X, Y)) * ind(X, Y)).ravel()
    apts = np.column_stack([X.ravel(), Y.ravel()])
    acells = np.repeat(space.active_ids, len(pts_ref))
    keep = aw != 0.0
    atoms = (apts[keep], aw[keep], acells[keep])

    w_u = _WeightPair(recovered_u, sol.u_h)
    one_a, pap_a = residual_split(sf, sol.z_h, w_u, dual=True,
                                  lin_state=sol.u_h, atoms=atoms, rule=rule)

    # control residual per boundary edge, folded into the adjacent cell
    rec = recovered_q if isinstance(recovered_q, ControlRecovery) \
        else ControlRecovery(recovered_q)
    rho_q_cells = np.zeros(len(space.active_ids))
    for cid, le in sol.q_h.trace.edges:
        pts, wts, _ = fem.edge_quadrature(mesh, cid, le, 3)
        cells_e = np.full(len(wts), cid)
        qv = fem.eval_in_cells(qvol, cells_e, pts)
        zv = fem.eval_in_cells(sol.z_h, cells_e, pts)
        wq = rec.weight_at(cid, le, pts)
        rho_q_cells[space.cell_pos[cid]] += float(
            np.sum(wts * (cp.alpha * qv + zv) * wq))

    primal_part = 0.5 * float(one_s.sum())
    dual_part = 0.5 * float(one_a.sum())
    control_part = 0.5 * float(rho_q_cells.sum())
    eta_cells = np.abs(0.5 * pap_s + 0.5 * pap_a + 0.5 * rho_q_cells)
    return ErrorEstimate(list(space.active_ids), eta_cells,
                         float(eta_cells.sum()),
                         primal_part + dual_part + control_part,
                         primal_part, dual_part, control_part=control_part)
