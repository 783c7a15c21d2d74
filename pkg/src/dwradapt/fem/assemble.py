"""Assembly of bilinear/semilinear forms, load vectors and functionals.

All cell loops are batched over the active cells with a shared reference
tabulation; hanging-node constraints are condensed during the scatter
(masters receive the distributed entries, constrained rows/columns get a
unit diagonal and zero load).  Quadrature: tensor Gauss, 2x2 for plain Q1
forms, 3x3 whenever Q2 fields, recovered weights or the cubic term are
involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, UsageError
from ..linalg import SparseMatrix
from . import reference
from .space import FeFunction, enforce_constraints

_KINDS = ("mass", "stiffness", "advection", "reaction", "semilinear_cubic",
          "custom")


@dataclass(frozen=True)
class FormTerm:
    kind: str
    coefficient: object = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise UsageError(f"unknown form kind {self.kind!r}")


@dataclass(frozen=True)
class FormDescriptor:
    """A sum of primitive form terms; compose with ``+``."""

    terms: tuple

    @classmethod
    def mass(cls, c=1.0):
        return cls((FormTerm("mass", c),))

    @classmethod
    def stiffness(cls, nu=1.0):
        return cls((FormTerm("stiffness", nu),))

    @classmethod
    def advection(cls, beta):
        return cls((FormTerm("advection", tuple(beta)),))

    @classmethod
    def reaction(cls, c):
        return cls((FormTerm("reaction", c),))

    @classmethod
    def semilinear_cubic(cls, scale=1.0):
        return cls((FormTerm("semilinear_cubic", scale),))

    @classmethod
    def custom(cls, kernel):
        return cls((FormTerm("custom", kernel),))

    def __add__(self, other):
        return FormDescriptor(self.terms + other.terms)

    @property
    def nonlinear(self):
        return any(t.kind == "semilinear_cubic" for t in self.terms)

    @property
    def symmetric(self):
        return all(t.kind in ("mass", "stiffness", "reaction",
                              "semilinear_cubic") for t in self.terms)

    def constant(self, kind, default=0.0):
        """Constant coefficient of a term kind (strong-form localization
        relies on constant coefficients)."""
        for t in self.terms:
            if t.kind == kind:
                if callable(t.coefficient):
                    raise UsageError(
                        f"{kind} coefficient must be constant for this use")
                return t.coefficient
        return default


def _coef_values(coef, X, Y):
    if callable(coef):
        vals = np.asarray(coef(X, Y), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise DataError("coefficient not evaluable at quadrature points")
        return np.broadcast_to(vals, X.shape)
    return np.full(X.shape, float(coef))


def quadrature_rule(space, form=None, rule=None):
    if rule is not None:
        return rule
    if space.degree == 1 and (form is None or not form.nonlinear):
        return 2
    return 3


def cell_quadrature(space, nq):
    """Physical quadrature points and scaled weights on every active cell.

    Returns (pts_ref (q,2), X (n,q), Y (n,q), W (n,q)) with W including the
    cell Jacobian.
    """
    pts, wts = reference.gauss_2d(nq)
    r = space.rects
    X = r[:, 0:1] + pts[None, :, 0] * r[:, 2:3]
    Y = r[:, 1:2] + pts[None, :, 1] * r[:, 3:4]
    W = wts[None, :] * (r[:, 2] * r[:, 3])[:, None]
    return pts, X, Y, W


def batch_eval(fh, ref_pts, gradient=False, second=False):
    """Evaluate a function on every active cell at shared reference points."""
    space = fh.space
    N, dN, d2N = reference.tabulate(space.degree, ref_pts)
    coeffs = fh.coefficients[space.cell_dofs]            # (n, ndpc)
    vals = coeffs @ N.T                                  # (n, q)
    out = [vals]
    hx = fh.space.rects[:, 2:3]
    hy = fh.space.rects[:, 3:4]
    if gradient:
        gx = (coeffs @ dN[:, :, 0].T) / hx
        gy = (coeffs @ dN[:, :, 1].T) / hy
        out.append(np.stack([gx, gy], axis=-1))
    if second:
        lap = (coeffs @ d2N[:, :, 0].T) / hx**2 + (coeffs @ d2N[:, :, 1].T) / hy**2
        out.append(lap)
    return out[0] if len(out) == 1 else tuple(out)


# ---------------------------------------------------------------------------
# operator assembly


def assemble_operator(space, form, linearization_point=None, rule=None,
                      constrained_diag=1.0):
    """Assemble the (linearized) form into a condensed CSR matrix.

    ``constrained_diag`` is the value placed on the diagonal of constrained
    (hanging) dofs; block-system assemblers pass 0.0 and add their own
    identity rows once per block row.
    """
    if form.nonlinear and linearization_point is None:
        raise UsageError("nonlinear form needs a linearization point")

    nq = quadrature_rule(space, form, rule)
    pts, X, Y, W = cell_quadrature(space, nq)
    N, dN, _ = reference.tabulate(space.degree, pts)
    n, d = space.cell_dofs.shape
    hx = space.rects[:, 2]
    hy = space.rects[:, 3]

    NN = (N[:, :, None] * N[:, None, :]).reshape(len(pts), -1)
    DXX = (dN[:, :, 0][:, :, None] * dN[:, :, 0][:, None, :]).reshape(len(pts), -1)
    DYY = (dN[:, :, 1][:, :, None] * dN[:, :, 1][:, None, :]).reshape(len(pts), -1)
    NDX = (N[:, :, None] * dN[:, :, 0][:, None, :]).reshape(len(pts), -1)
    NDY = (N[:, :, None] * dN[:, :, 1][:, None, :]).reshape(len(pts), -1)

    loc = np.zeros((n, d * d))
    for term in form.terms:
        if term.kind in ("mass", "reaction"):
            c = _coef_values(term.coefficient, X, Y)
            loc += (W * c) @ NN
        elif term.kind == "stiffness":
            nu = _coef_values(term.coefficient, X, Y)
            loc += ((W * nu) / hx[:, None] ** 2) @ DXX
            loc += ((W * nu) / hy[:, None] ** 2) @ DYY
        elif term.kind == "advection":
            bx, by = term.coefficient
            bxv = _coef_values(bx, X, Y)
            byv = _coef_values(by, X, Y)
            loc += ((W * bxv) / hx[:, None]) @ NDX
            loc += ((W * byv) / hy[:, None]) @ NDY
        elif term.kind == "semilinear_cubic":
            u = batch_eval(linearization_point, pts)
            loc += (W * (3.0 * term.coefficient * u * u)) @ NN
        elif term.kind == "custom":
            loc += term.coefficient(space, pts, X, Y, W).reshape(n, d * d)

    rows = np.repeat(space.cell_dofs, d, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, d)).ravel()
    return scatter_condensed(space, rows, cols, loc.ravel(),
                             constrained_diag=constrained_diag)


def scatter_condensed(space, rows, cols, vals, shape=None, constrained_diag=1.0):
    """COO -> CSR with hanging constraints distributed to master dofs."""
    shape = shape or (space.dof_count, space.dof_count)
    mask = space.constrained_mask()
    hot = mask[rows] | mask[cols]
    out_r = [rows[~hot]]
    out_c = [cols[~hot]]
    out_v = [vals[~hot]]
    er, ec, ev = [], [], []
    for k in np.nonzero(hot)[0]:
        r, c, v = int(rows[k]), int(cols[k]), vals[k]
        rmasters, rweights = space.constraints.get(r, ((r,), (1.0,)))
        cmasters, cweights = space.constraints.get(c, ((c,), (1.0,)))
        for rm, rw in zip(rmasters, rweights):
            for cm, cw in zip(cmasters, cweights):
                er.append(rm)
                ec.append(cm)
                ev.append(rw * cw * v)
    if er:
        out_r.append(np.array(er, dtype=np.int64))
        out_c.append(np.array(ec, dtype=np.int64))
        out_v.append(np.array(ev))
    cdofs = np.nonzero(mask)[0]
    if cdofs.size and constrained_diag != 0.0:
        out_r.append(cdofs)
        out_c.append(cdofs)
        out_v.append(np.full(cdofs.size, constrained_diag))
    return SparseMatrix.from_coo(np.concatenate(out_r), np.concatenate(out_c),
                                 np.concatenate(out_v), shape)


def condense_vector(space, vec):
    for dof, (masters, coeffs) in space.constraints.items():
        for m, c in zip(masters, coeffs):
            vec[m] += c * vec[dof]
        vec[dof] = 0.0
    return vec


# ---------------------------------------------------------------------------
# load vectors and functionals


def assemble_load(space, f=None, neumann=None, rule=None):
    """Right-hand side vector: cell source term plus Neumann flux data."""
    nq = quadrature_rule(space, None, rule)
    out = np.zeros(space.dof_count)
    if f is not None:
        pts, X, Y, W = cell_quadrature(space, nq)
        N, _, _ = reference.tabulate(space.degree, pts)
        fv = _coef_values(f, X, Y)
        np.add.at(out, space.cell_dofs, (W * fv) @ N)
    if neumann:
        for tag in sorted(neumann):
            g = neumann[tag]
            for cid, le in boundary_edges(space.mesh, tag):
                pts_e, wts_e, _ = edge_quadrature(space.mesh, cid, le, 3)
                row = space.cell_pos[cid]
                rect = space.rects[row]
                loc = np.column_stack([(pts_e[:, 0] - rect[0]) / rect[2],
                                       (pts_e[:, 1] - rect[1]) / rect[3]])
                N, _, _ = reference.tabulate(space.degree, loc)
                gv = _coef_values(g, pts_e[:, 0], pts_e[:, 1])
                out[space.cell_dofs[row]] += (wts_e * gv) @ N
    return condense_vector(space, out)


def assemble_semilinear_vector(space, u_h, scale=1.0, rule=3):
    """The vector of the cubic term: entries scale * (u_h^3, phi_i)."""
    pts, X, Y, W = cell_quadrature(space, rule)
    N, _, _ = reference.tabulate(space.degree, pts)
    u = batch_eval(u_h, pts)
    out = np.zeros(space.dof_count)
    np.add.at(out, space.cell_dofs, (W * (scale * u**3)) @ N)
    return condense_vector(space, out)


def assemble_functional(space, goal, state=None):
    """Vector of goal derivatives J'(u_h)(phi_i) from the goal's atom cloud.

    Every registered goal is linear, so ``state`` is accepted for interface
    symmetry and ignored.
    """
    pts, wts, cells = goal.atoms_for(space.mesh)
    out = np.zeros(space.dof_count)
    rows = np.array([space.cell_pos[c] for c in cells])
    rect = space.rects[rows]
    loc = np.column_stack([(pts[:, 0] - rect[:, 0]) / rect[:, 2],
                           (pts[:, 1] - rect[:, 1]) / rect[:, 3]])
    N, _, _ = reference.tabulate(space.degree, loc)
    np.add.at(out.reshape(-1), space.cell_dofs[rows].ravel(),
              (wts[:, None] * N).ravel())
    return condense_vector(space, out)


# ---------------------------------------------------------------------------
# boundary helpers


def boundary_edges(mesh, tag=None):
    """(cell, local_edge) pairs of tagged boundary facets, in edge order."""
    out = []
    for (cid, le), rec in mesh.edge_info.items():
        if rec[0] == "boundary" and (tag is None or rec[1] == tag):
            out.append((cid, le))
    return sorted(out)


def segment_quadrature(p0, p1, npts=3):
    t, w = reference.gauss_1d(npts)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    pts = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    length = float(np.hypot(*(p1 - p0)))
    return pts, w * length


def edge_quadrature(mesh, cid, le, npts=3):
    """Gauss points, length-scaled weights and outward normal of a cell edge."""
    from ..mesh import EDGE_NORMALS

    a, b = mesh.cell_edge_vertices(cid, le)
    pts, wts = segment_quadrature(mesh.coords(a), mesh.coords(b), npts)
    return pts, wts, np.array(EDGE_NORMALS[le])


# ---------------------------------------------------------------------------
# Dirichlet conditions


def apply_dirichlet(A, b, space, values, tags=None):
    """Symmetric elimination of Dirichlet dofs.

    ``values`` is a callable g(x, y) applied on all tagged boundary edges,
    or a dict {tag: g}.  Boundary rows and columns are zeroed, the diagonal
    set to one, column contributions moved to the right-hand side, and
    b[dof] set to the boundary value.  Returns a new (matrix, vector) pair.
    """
    if isinstance(values, dict):
        items = [(t, values[t]) for t in sorted(values)]
    else:
        if tags is None:
            items = [(None, values)]
        else:
            items = [(t, values) for t in sorted(tags)]

    gvals = {}
    for tag, g in items:
        dofs = space.boundary_dofs(None if tag is None else {tag})
        pts = space.dof_points[dofs]
        if callable(g):
            vals = np.asarray(g(pts[:, 0], pts[:, 1]), dtype=float)
            vals = np.broadcast_to(vals, (len(dofs),))
        else:
            vals = np.full(len(dofs), float(g))
        for d, v in zip(dofs, vals):
            gvals[int(d)] = float(v)

    bdofs = np.array(sorted(gvals), dtype=np.int64)
    g = np.array([gvals[d] for d in bdofs])
    isb = np.zeros(space.dof_count, dtype=bool)
    isb[bdofs] = True
    gfull = np.zeros(space.dof_count)
    gfull[bdofs] = g

    indptr, indices, data = A.indptr.copy(), A.indices.copy(), A.data.copy()
    rows = np.repeat(np.arange(A.shape[0]), np.diff(indptr))
    col_hits = isb[indices] & ~isb[rows]
    b2 = b - np.bincount(rows[col_hits],
                         weights=data[col_hits] * gfull[indices[col_hits]],
                         minlength=A.shape[0])
    data = data.copy()
    data[isb[indices] | isb[rows]] = 0.0
    A2 = SparseMatrix(indptr, indices, data, A.shape)
    A2 = A2 + SparseMatrix.from_coo(bdofs, bdofs, np.ones(len(bdofs)), A.shape)
    b2[bdofs] = g
    return A2, b2


def dirichlet_dofs_and_values(space, dirichlet):
    """Flattened (dofs, values) for a {tag: g} Dirichlet specification."""
    gvals = {}
    for tag in sorted(dirichlet):
        g = dirichlet[tag]
        dofs = space.boundary_dofs({tag})
        pts = space.dof_points[dofs]
        if callable(g):
            vals = np.broadcast_to(np.asarray(g(pts[:, 0], pts[:, 1]),
                                              dtype=float), (len(dofs),))
        else:
            vals = np.full(len(dofs), float(g))
        for d, v in zip(dofs, vals):
            gvals[int(d)] = float(v)
    dofs = np.array(sorted(gvals), dtype=np.int64)
    return dofs, np.array([gvals[d] for d in dofs])
