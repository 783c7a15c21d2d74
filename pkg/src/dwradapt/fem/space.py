"""Finite element spaces and functions on hanging-node meshes.

Q1 and Q2 continuous spaces.  Hanging dofs are constrained to the master
dofs of the coarse edge they sit on: edge-midpoint averaging for Q1,
quadratic interpolation of the three coarse edge dofs for Q2.  A space
built with ``continuous=False`` carries one independent set of dofs per
cell and no constraints; patch recovery writes its output into such a
space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, UsageError
from . import reference


@dataclass
class FeSpace:
    mesh: object
    degree: int
    dof_count: int
    cell_dofs: np.ndarray          # (n_active, ndpc), row order = mesh.active_ids
    dof_points: np.ndarray         # (dof_count, 2) support points
    constraints: dict              # dof -> (masters tuple, coeffs tuple)
    entity_dofs: dict = field(repr=False, default=None)
    continuous: bool = True

    def __post_init__(self):
        self.active_ids = list(self.mesh.active_ids)
        self.cell_pos = {cid: i for i, cid in enumerate(self.active_ids)}
        self.rects = np.array([self.mesh.cell_rect(c) for c in self.active_ids])
        self._constrained = np.zeros(self.dof_count, dtype=bool)
        for d in self.constraints:
            self._constrained[d] = True

    @property
    def ndpc(self):
        return self.cell_dofs.shape[1]

    def constrained_mask(self):
        return self._constrained

    def boundary_dofs(self, tags=None):
        """Dofs supported on tagged boundary edges, as a sorted array.

        ``tags=None`` collects every tagged boundary edge.
        """
        picked = set()
        for (cid, le), rec in self.mesh.edge_info.items():
            if rec[0] != "boundary":
                continue
            if tags is not None and rec[1] not in tags:
                continue
            a, b = self.mesh.cell_edge_vertices(cid, le)
            picked.add(self.entity_dofs[("v", a)])
            picked.add(self.entity_dofs[("v", b)])
            if self.degree == 2:
                key = (a, b) if a < b else (b, a)
                picked.add(self.entity_dofs[("e",) + key])
        return np.array(sorted(picked), dtype=np.int64)


@dataclass
class FeFunction:
    space: FeSpace
    coefficients: np.ndarray

    def copy(self):
        return FeFunction(self.space, self.coefficients.copy())

    def enforce_constraints(self):
        enforce_constraints(self.space, self.coefficients)
        return self

    def __call__(self, x, y):
        return evaluate(self, x, y)


def enforce_constraints(space, vec):
    for d, (masters, coeffs) in space.constraints.items():
        vec[d] = sum(c * vec[m] for m, c in zip(masters, coeffs))
    return vec


def zero_function(space):
    return FeFunction(space, np.zeros(space.dof_count))


def build_space(mesh, degree):
    """Continuous Q1/Q2 space with hanging-node constraints condensed later
    at assembly time."""
    if degree not in (1, 2):
        raise UsageError("degree must be 1 or 2")
    entity = {}
    points = []

    def dof_for(key, pt):
        d = entity.get(key)
        if d is None:
            d = len(points)
            entity[key] = d
            points.append(pt)
        return d

    rows = []
    for cid in mesh.active_ids:
        verts = mesh.cells[cid].vertex_ids
        dofs = [dof_for(("v", v), mesh.coords(v)) for v in verts]
        if degree == 2:
            for le in range(4):
                a, b = mesh.cell_edge_vertices(cid, le)
                key = ("e",) + ((a, b) if a < b else (b, a))
                ax, ay = mesh.coords(a)
                bx, by = mesh.coords(b)
                dofs.append(dof_for(key, (0.5 * (ax + bx), 0.5 * (ay + by))))
            dofs.append(dof_for(("c", cid), mesh.cell_center(cid)))
        rows.append(dofs)

    constraints = {}
    for m, (a, b), coarse_cid, (f1, f2) in mesh.hanging_nodes:
        if degree == 1:
            constraints[entity[("v", m)]] = (
                (entity[("v", a)], entity[("v", b)]), (0.5, 0.5))
        else:
            A = entity[("v", a)]
            B = entity[("v", b)]
            E = entity[("e", a, b)]
            constraints[entity[("v", m)]] = ((E,), (1.0,))
            k1 = ("e",) + ((a, m) if a < m else (m, a))
            k2 = ("e",) + ((m, b) if m < b else (b, m))
            # fine edge nodes sit at s=1/4 and s=3/4 of the coarse edge;
            # coefficients are the coarse quadratic Lagrange basis there
            constraints[entity[k1]] = ((A, E, B), (0.375, 0.75, -0.125))
            constraints[entity[k2]] = ((A, E, B), (-0.125, 0.75, 0.375))

    # single-level check: masters must themselves be unconstrained
    for d, (masters, _) in constraints.items():
        for mdof in masters:
            if mdof in constraints:
                raise AssertionError("chained hanging-node constraint")

    return FeSpace(mesh, degree, len(points),
                   np.array(rows, dtype=np.int64), np.array(points),
                   constraints, entity_dofs=entity)


def build_broken_space(mesh, degree=2):
    """Cell-wise discontinuous space (independent dofs per cell).

    Post-processing target for patch recovery; carries no constraints.
    """
    ndpc = 4 if degree == 1 else 9
    nodes = reference.node_points(degree)
    n = len(mesh.active_ids)
    rows = np.arange(n * ndpc, dtype=np.int64).reshape(n, ndpc)
    points = np.empty((n * ndpc, 2))
    for i, cid in enumerate(mesh.active_ids):
        x0, y0, hx, hy = mesh.cell_rect(cid)
        points[rows[i], 0] = x0 + nodes[:, 0] * hx
        points[rows[i], 1] = y0 + nodes[:, 1] * hy
    return FeSpace(mesh, degree, n * ndpc, rows, points, {},
                   entity_dofs=None, continuous=False)


def nodal_interpolate(space, f):
    """Interpolate a callable (or constant) at the dof support points."""
    pts = space.dof_points
    if callable(f):
        vals = np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float)
        if vals.shape != (space.dof_count,):
            vals = np.broadcast_to(vals, (space.dof_count,)).copy()
    else:
        vals = np.full(space.dof_count, float(f))
    fh = FeFunction(space, vals)
    fh.enforce_constraints()
    return fh


def interpolate_function(space, fh):
    """Nodal interpolation of another finite element function."""
    vals = np.array([evaluate(fh, x, y) for x, y in space.dof_points])
    out = FeFunction(space, vals)
    out.enforce_constraints()
    return out


def local_coords(space, cells, pts):
    """Reference coordinates of physical points inside given active cells."""
    rows = np.array([space.cell_pos[c] for c in np.atleast_1d(cells)])
    rect = space.rects[rows]
    pts = np.atleast_2d(pts)
    xi = (pts[:, 0] - rect[:, 0]) / rect[:, 2]
    eta = (pts[:, 1] - rect[:, 1]) / rect[:, 3]
    return rows, np.column_stack([xi, eta])


def eval_in_cells(fh, cells, pts, gradient=False):
    """Evaluate at physical points, each located in a stated active cell."""
    space = fh.space
    rows, loc = local_coords(space, cells, pts)
    N, dN, _ = reference.tabulate(space.degree, loc)
    coeffs = fh.coefficients[space.cell_dofs[rows]]          # (k, ndpc)
    vals = np.einsum("ki,ki->k", N, coeffs)
    if not gradient:
        return vals
    rect = space.rects[rows]
    gx = np.einsum("ki,ki->k", dN[:, :, 0], coeffs) / rect[:, 2]
    gy = np.einsum("ki,ki->k", dN[:, :, 1], coeffs) / rect[:, 3]
    return vals, np.column_stack([gx, gy])


def evaluate(fh, x, y):
    """Point value via reference-cell pullback (continuous across interfaces
    for conforming spaces)."""
    cid = fh.space.mesh.locate(x, y)
    return float(eval_in_cells(fh, [cid], [(x, y)])[0])


def evaluate_in_cell(fh, cid, x, y):
    """Point value using a specific cell's dofs (for interface audits)."""
    if cid not in fh.space.mesh.active_cells:
        raise DomainError(f"cell {cid} is not active")
    return float(eval_in_cells(fh, [cid], [(x, y)])[0])
