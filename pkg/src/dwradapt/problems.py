"""Benchmark problem registry, goal functionals and reference oracles.

Goals are realized as quadrature atom clouds (points, weights, owning
cells): the functional *is* the atom sum.  This keeps the discrete dual
right-hand side, the weighted-residual evaluation and the indicator
localization mutually consistent to machine precision, and lets a
functional bound on one mesh be applied verbatim on a refinement.

Reference values never touch the estimator machinery: closed forms and
series where available, otherwise a finer, higher-order computation
(flagged as numerical).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fem, linalg
from .errors import DataError, DomainError, UsageError
from .mesh import create_lshape, create_rect_grid, refine_with_closure, uniform_refine
from .optctrl import ControlProblem


# ---------------------------------------------------------------------------
# goal functionals


def _boundary_distance(mesh, x, y):
    dist = math.inf
    for (cid, le), rec in mesh.edge_info.items():
        if rec[0] != "boundary":
            continue
        a, b = mesh.cell_edge_vertices(cid, le)
        ax, ay = mesh.coords(a)
        bx, by = mesh.coords(b)
        t = ((x - ax) * (bx - ax) + (y - ay) * (by - ay)) / ((bx - ax) ** 2 + (by - ay) ** 2)
        t = min(1.0, max(0.0, t))
        dist = min(dist, math.hypot(ax + t * (bx - ax) - x, ay + t * (by - ay) - y))
    return dist


@dataclass(frozen=True)
class GoalFunctional:
    """Linear output functional; ``bind`` resolves it on a mesh."""

    kind: str
    x0: tuple = None
    region: tuple = None          # (x0, x1, y0, y1)
    tag: int = None
    density: object = None        # f for the right-hand-side functional

    @classmethod
    def point_value(cls, x0):
        return cls("point_value", x0=tuple(x0))

    @classmethod
    def subdomain_mean(cls, region):
        return cls("subdomain_mean", region=tuple(region))

    @classmethod
    def boundary_flux(cls, tag):
        return cls("boundary_flux", tag=tag)

    @classmethod
    def rhs_functional(cls, f):
        return cls("rhs_functional", density=f)

    def bind(self, mesh):
        if self.kind == "point_value":
            return _bind_point_value(self, mesh)
        if self.kind == "subdomain_mean":
            return _bind_subdomain_mean(self, mesh)
        if self.kind == "boundary_flux":
            return _bind_boundary_flux(self, mesh)
        if self.kind == "rhs_functional":
            return _bind_rhs_functional(self, mesh)
        raise UsageError(f"unknown goal kind {self.kind!r}")


class BoundGoal:
    """A goal frozen into a quadrature atom cloud.

    The atoms are fixed at bind time; ``atoms_for`` re-locates the owning
    cells when the goal is applied on another (e.g. refined) mesh, so the
    functional itself stays identical across spaces.
    """

    def __init__(self, goal, mesh, points, weights, cells, radius=None):
        self.goal = goal
        self.kind = goal.kind
        self.mesh0 = mesh
        self.points = points
        self.weights = weights
        self.radius = radius
        self._cells = {id(mesh): np.asarray(cells, dtype=np.int64)}
        self._meshes = {id(mesh): mesh}

    def atoms_for(self, mesh):
        key = id(mesh)
        if key not in self._cells:
            cells = np.array([mesh.locate(x, y) for x, y in self.points],
                             dtype=np.int64)
            self._cells[key] = cells
            self._meshes[key] = mesh
        return self.points, self.weights, self._cells[key]

    def vector(self, space):
        return fem.assemble_functional(space, self)

    def apply(self, w):
        """J'(.)(w) = J(w) for these linear goals; w is a finite element
        function or a callable."""
        if callable(w) and not isinstance(w, fem.FeFunction):
            vals = np.asarray(w(self.points[:, 0], self.points[:, 1]), dtype=float)
            return float(self.weights @ vals)
        pts, wts, cells = self.atoms_for(w.space.mesh)
        vals = fem.eval_in_cells(w, cells, pts)
        return float(wts @ vals)

    value = apply


def _bind_point_value(goal, mesh, n_rho=6, n_theta=20):
    """Regularized point value: average over the disc of radius r = local
    cell diameter (capped by the boundary distance), constant mollifier."""
    x0, y0 = goal.x0
    cid = mesh.locate(x0, y0)   # raises DomainError outside
    r = mesh.cell_diameter(cid)
    dist = _boundary_distance(mesh, x0, y0)
    if dist <= 0:
        raise DomainError("regularized point value needs an interior point")
    r = min(r, 0.9 * dist)
    t, wt = fem.segment_quadrature((0.0, 0.0), (1.0, 0.0), n_rho)
    rho = t[:, 0]
    theta = 2.0 * math.pi * (np.arange(n_theta) + 0.5) / n_theta
    R, TH = np.meshgrid(rho, theta, indexing="ij")
    pts = np.column_stack([x0 + r * (R * np.cos(TH)).ravel(),
                           y0 + r * (R * np.sin(TH)).ravel()])
    # (1/(pi r^2)) * r^2 rho drho dtheta -> weights independent of r
    W = (2.0 / n_theta) * np.outer(wt * rho, np.ones(n_theta)).ravel()
    cells = [mesh.locate(x, y) for x, y in pts]
    return BoundGoal(goal, mesh, pts, W, cells, radius=r)


def _bind_subdomain_mean(goal, mesh):
    xa, xb, ya, yb = goal.region
    area = (xb - xa) * (yb - ya)
    pts_list, wts_list, cells_list = [], [], []
    covered = 0.0
    for cid in mesh.active_ids:
        x0, y0, hx, hy = mesh.cell_rect(cid)
        tol = 1e-12 * max(hx, hy)
        if x0 >= xa - tol and x0 + hx <= xb + tol and y0 >= ya - tol and y0 + hy <= yb + tol:
            ref, w2 = fem.reference.gauss_2d(3)
            pts_list.append(np.column_stack([x0 + ref[:, 0] * hx,
                                             y0 + ref[:, 1] * hy]))
            wts_list.append(w2 * hx * hy / area)
            cells_list.append(np.full(len(w2), cid))
            covered += hx * hy
    if abs(covered - area) > 1e-10 * area:
        raise DataError("subdomain is not resolved by the mesh")
    return BoundGoal(goal, mesh, np.vstack(pts_list), np.concatenate(wts_list),
                     np.concatenate(cells_list))


def _bind_boundary_flux(goal, mesh):
    pts_list, wts_list, cells_list = [], [], []
    for cid, le in fem.boundary_edges(mesh, goal.tag):
        pts, wts, _ = fem.edge_quadrature(mesh, cid, le, 3)
        pts_list.append(pts)
        wts_list.append(wts)
        cells_list.append(np.full(len(wts), cid))
    if not pts_list:
        raise DataError(f"no boundary edges with tag {goal.tag}")
    return BoundGoal(goal, mesh, np.vstack(pts_list), np.concatenate(wts_list),
                     np.concatenate(cells_list))


def _bind_rhs_functional(goal, mesh):
    pts_list, wts_list, cells_list = [], [], []
    ref, w2 = fem.reference.gauss_2d(3)
    for cid in mesh.active_ids:
        x0, y0, hx, hy = mesh.cell_rect(cid)
        X = x0 + ref[:, 0] * hx
        Y = y0 + ref[:, 1] * hy
        f = goal.density
        fv = f(X, Y) if callable(f) else np.full(len(w2), float(f))
        pts_list.append(np.column_stack([X, Y]))
        wts_list.append(w2 * hx * hy * fv)
        cells_list.append(np.full(len(w2), cid))
    return BoundGoal(goal, mesh, np.vstack(pts_list), np.concatenate(wts_list),
                     np.concatenate(cells_list))


def regularize_point_value(x0, mesh):
    """Disc-average regularization of a point value (unit-mass mollifier,
    radius tied to the local cell diameter)."""
    return GoalFunctional.point_value(x0).bind(mesh)


# ---------------------------------------------------------------------------
# problem definitions


@dataclass
class ProblemDefinition:
    name: str
    title: str
    kind: str                      # 'variational' | 'eigen' | 'control'
    geometry: str
    form: fem.FormDescriptor = None
    m_form: fem.FormDescriptor = None
    shift: float = None
    rhs: object = None
    dirichlet: dict = field(default_factory=dict)
    neumann: dict = field(default_factory=dict)
    goal: GoalFunctional = None
    control: ControlProblem = None
    base_mesh: object = None       # callable -> Mesh
    reference_rule: object = None  # callable -> ReferenceValue

    @property
    def nonlinear(self):
        return self.form is not None and self.form.nonlinear

    @property
    def symmetric(self):
        return self.form is not None and self.form.symmetric


@dataclass(frozen=True)
class ReferenceValue:
    value: float
    method: str
    error_bound: float = None


_reference_cache = {}


def reference_value(problem):
    """Mesh-independent reference value of the problem's goal."""
    info = reference_info(problem)
    return info.value


def reference_info(problem):
    if problem.name not in _reference_cache:
        _reference_cache[problem.name] = problem.reference_rule()
    return _reference_cache[problem.name]


# -- P1: Poisson on the unit square, regularized center value --------------

_P1_MODES = 399


def p1_exact(x, y, modes=_P1_MODES):
    """Fourier series solution of -lap u = 1, u=0 on the unit square."""
    m = np.arange(1, modes + 1, 2, dtype=float)
    M, N = np.meshgrid(m, m, indexing="ij")
    C = 16.0 / (np.pi**4 * M * N * (M**2 + N**2))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    Sx = np.sin(np.pi * np.outer(m, x))
    Sy = np.sin(np.pi * np.outer(m, y))
    return np.einsum("mn,mk,nk->k", C, Sx, Sy)


def _p1_reference():
    val = float(p1_exact(0.5, 0.5)[0])
    # crude absolute tail bound of the truncated double series
    m = np.arange(1, 4001, 2, dtype=float)
    M, N = np.meshgrid(m, m, indexing="ij")
    terms = 16.0 / (np.pi**4 * M * N * (M**2 + N**2))
    tail = float(terms[(M > _P1_MODES) | (N > _P1_MODES)].sum())
    return ReferenceValue(val, f"fourier series, odd modes <= {_P1_MODES}", tail)


# -- P1L: Poisson on the L-shape ------------------------------------------


def _graded_lshape(n_uniform=5, n_corner=12):
    mesh = uniform_refine(create_lshape(), n_uniform)
    for _ in range(n_corner):
        touching = [cid for cid in mesh.active_ids
                    if any(mesh.coords(v) == (0.0, 0.0)
                           for v in mesh.cells[cid].vertex_ids)]
        mesh = refine_with_closure(mesh, touching)
    return mesh


def _p1l_reference(n_uniform=5, n_corner=12):
    mesh = _graded_lshape(n_uniform, n_corner)
    space = fem.build_space(mesh, 2)
    A = fem.assemble_operator(space, fem.FormDescriptor.stiffness())
    b = fem.assemble_load(space, f=1.0, rule=3)
    A, b = fem.apply_dirichlet(A, b, space, 0.0)
    x, rep = linalg.solve_cg(A, b, tol=1e-13, max_iter=20000)
    if not rep.converged:
        raise RuntimeError("P1L reference solve did not converge")
    uh = fem.FeFunction(space, x)
    uh.enforce_constraints()
    return ReferenceValue(fem.evaluate(uh, -0.5, 0.5),
                          "Q2 on corner-graded mesh "
                          f"(uniform {n_uniform}, corner {n_corner})")


# -- P2: advection-diffusion, outflow flux ---------------------------------

_P2_NU = 0.01
_P2_BETA = (1.0, 0.0)


def _p2_inflow(x, y):
    return 4.0 * y * (1.0 - y)


def _p2_form():
    return fem.FormDescriptor.stiffness(_P2_NU) + fem.FormDescriptor.advection(_P2_BETA)


def _p2_reference():
    mesh = uniform_refine(create_rect_grid(16, 16), 2)
    space = fem.build_space(mesh, 2)
    A = fem.assemble_operator(space, _p2_form())
    b = np.zeros(space.dof_count)
    A, b = fem.apply_dirichlet(A, b, space, {4: _p2_inflow})
    x, rep = linalg.solve_gmres(A, b, tol=1e-12, restart=200,
                                max_iter=200000, jacobi=True)
    if not rep.converged:
        raise RuntimeError("P2 reference solve did not converge")
    uh = fem.FeFunction(space, x)
    uh.enforce_constraints()
    goal = GoalFunctional.boundary_flux(2).bind(mesh)
    return ReferenceValue(goal.apply(uh), "Q2 on a 4x finer grid (numerical)")


# -- P3: semilinear with manufactured solution ------------------------------


def p3_exact(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def _p3_rhs(x, y):
    s = np.sin(np.pi * x) * np.sin(np.pi * y)
    return 2.0 * np.pi**2 * s + s**3


def _p3_reference():
    # mean of sin(pi x) sin(pi y) over [0, 1/2]^2: (1/pi)^2 / (1/4)
    return ReferenceValue(4.0 / np.pi**2, "closed-form integral of the "
                          "manufactured solution")


# -- P4 / P4n: eigenvalue problems ------------------------------------------

_P4N_NU = 0.1


def _p4_reference():
    return ReferenceValue(2.0 * np.pi**2, "separable exact eigenvalue")


def _p4n_reference():
    # exponential substitution turns -nu lap + d/dx into -nu lap + 1/(4 nu)
    return ReferenceValue(_P4N_NU * 2.0 * np.pi**2 + 1.0 / (4.0 * _P4N_NU),
                          "closed form via exponential transform")


# -- P5: boundary control ----------------------------------------------------


def _p5_control():
    return ControlProblem(
        state_form=fem.FormDescriptor.stiffness() + fem.FormDescriptor.reaction(1.0),
        control_tag=4,
        alpha=1e-2,
        observation=(0.5, 1.0, 0.0, 1.0),
        target=lambda x, y: np.asarray(x, dtype=float),
        rhs=None,
    )


def _p5_reference():
    from .optctrl import solve_kkt_reduced

    # the cost is second-order accurate in the control error, so a modest
    # outer tolerance already pins J to ~1e-11
    mesh = uniform_refine(create_rect_grid(16, 16), 2)
    sol = solve_kkt_reduced(_p5_control(), mesh, degree=2, tol=1e-8)
    return ReferenceValue(sol.cost, "Q2 KKT solve on a 4x finer grid "
                          "(reduced-space CG, numerical)")


# ---------------------------------------------------------------------------
# registry


def registry():
    """The benchmark problems, in fixed order."""
    return [
        ProblemDefinition(
            name="p1", title="Poisson, regularized point value at the center",
            kind="variational", geometry="unit_square",
            form=fem.FormDescriptor.stiffness(),
            rhs=1.0,
            dirichlet={1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0},
            goal=GoalFunctional.point_value((0.5, 0.5)),
            base_mesh=lambda: uniform_refine(create_rect_grid(8, 8), 1),
            reference_rule=_p1_reference,
        ),
        ProblemDefinition(
            name="p1l", title="Poisson on the L-shape, point value at (-0.5, 0.5)",
            kind="variational", geometry="lshape",
            form=fem.FormDescriptor.stiffness(),
            rhs=1.0,
            dirichlet={1: 0.0},
            goal=GoalFunctional.point_value((-0.5, 0.5)),
            base_mesh=lambda: uniform_refine(create_lshape(), 2),
            reference_rule=_p1l_reference,
        ),
        ProblemDefinition(
            name="p2", title="advection-diffusion, outflow flux "
            "(reversed-advection dual)",
            kind="variational", geometry="unit_square",
            form=_p2_form(),
            rhs=None,
            dirichlet={4: _p2_inflow},
            goal=GoalFunctional.boundary_flux(2),
            base_mesh=lambda: uniform_refine(create_rect_grid(8, 8), 1),
            reference_rule=_p2_reference,
        ),
        ProblemDefinition(
            name="p3", title="semilinear -lap u + u^3 = f, subdomain mean",
            kind="variational", geometry="unit_square",
            form=fem.FormDescriptor.stiffness() + fem.FormDescriptor.semilinear_cubic(),
            rhs=_p3_rhs,
            dirichlet={1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0},
            goal=GoalFunctional.subdomain_mean((0.0, 0.5, 0.0, 0.5)),
            base_mesh=lambda: uniform_refine(create_rect_grid(4, 4), 1),
            reference_rule=_p3_reference,
        ),
        ProblemDefinition(
            name="p4", title="Laplace eigenvalue on the unit square",
            kind="eigen", geometry="unit_square",
            form=fem.FormDescriptor.stiffness(),
            m_form=fem.FormDescriptor.mass(),
            shift=15.0,
            dirichlet={1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0},
            base_mesh=lambda: uniform_refine(create_rect_grid(4, 4), 1),
            reference_rule=_p4_reference,
        ),
        ProblemDefinition(
            name="p4n", title="advection-diffusion eigenvalue (nonsymmetric)",
            kind="eigen", geometry="unit_square",
            form=fem.FormDescriptor.stiffness(_P4N_NU) + fem.FormDescriptor.advection((1.0, 0.0)),
            m_form=fem.FormDescriptor.mass(),
            shift=4.0,
            dirichlet={1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0},
            base_mesh=lambda: uniform_refine(create_rect_grid(4, 4), 1),
            reference_rule=_p4n_reference,
        ),
        ProblemDefinition(
            name="p5", title="boundary control of -lap u + u (left-edge flux)",
            kind="control", geometry="unit_square",
            control=_p5_control(),
            base_mesh=lambda: uniform_refine(create_rect_grid(4, 4), 1),
            reference_rule=_p5_reference,
        ),
    ]


def get_problem(name):
    for p in registry():
        if p.name == name:
            return p
    names = ", ".join(p.name for p in registry())
    raise UsageError(f"unknown problem {name!r}; registered problems: {names}")
