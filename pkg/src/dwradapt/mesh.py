"""Hierarchical 2D quadrilateral meshes with one-irregular hanging nodes.

Cells are axis-aligned rectangles (the constructors below and isotropic
1->4 refinement only ever produce rectangles).  A mesh keeps its full
refinement history: refined cells stay in ``cells`` as ancestors, the
leaves form ``active_cells``.  ``refine_with_closure`` returns a new mesh
value; meshes are never mutated after construction, so they can be shared
freely across threads.

Local conventions (counterclockwise):
    vertices  0:(x0,y0)  1:(x1,y0)  2:(x1,y1)  3:(x0,y1)
    edge k joins vertex k and vertex (k+1) % 4, i.e.
    0: bottom, 1: right, 2: top, 3: left.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DomainError, UsageError

# local edge -> (vertex, vertex)
_EDGE_VERTS = ((0, 1), (1, 2), (2, 3), (3, 0))
# outward unit normal per local edge of an axis-aligned cell
EDGE_NORMALS = ((0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0))


@dataclass(frozen=True)
class Vertex:
    id: int
    x: float
    y: float


@dataclass
class Cell:
    id: int
    vertex_ids: tuple[int, int, int, int]
    level: int
    parent: int | None = None
    children: tuple[int, int, int, int] | None = None
    # per local edge; 0 = interior, >0 = boundary marker
    boundary_tags: tuple[int, int, int, int] = (0, 0, 0, 0)


@dataclass(frozen=True)
class Edge:
    """One facet of the active mesh at its coarsest granularity.

    ``cells`` lists the adjacent active cells: two for a conforming
    interior edge, one for a boundary edge, three (coarse, fine, fine)
    for a hanging interface.  ``hanging`` is the hanging vertex id on a
    nonconforming edge, else None.
    """

    vertices: tuple[int, int]
    cells: tuple[int, ...]
    hanging: int | None
    tag: int = 0


def _ekey(a, b):
    return (a, b) if a < b else (b, a)


def _cell_edge_vertices(cells, cid, local_edge):
    vs = cells[cid].vertex_ids
    i, j = _EDGE_VERTS[local_edge]
    return vs[i], vs[j]


def _ancestors(cells, cid):
    out = []
    p = cells[cid].parent
    while p is not None:
        out.append(p)
        p = cells[p].parent
    return out


def _active_leaves_on(topo, cid, key):
    """Active descendants of `cid` touching edge `key` (a segment of one
    of cid's edges)."""
    if cid in topo.active:
        return [cid]
    m = topo.midpoints.get(key)
    if m is None:
        # children always split every parent edge
        raise AssertionError("refined cell with unsplit edge")
    a, b = key
    out = []
    for sub in (_ekey(a, m), _ekey(m, b)):
        for ch in topo.cells[cid].children:
            edges = {_ekey(*_cell_edge_vertices(topo.cells, ch, k)) for k in range(4)}
            if sub in edges:
                out.extend(_active_leaves_on(topo, ch, sub))
                break
    return out


def _parent_edge(topo, key):
    """If `key` is one half of a coarser edge, return that edge's key."""
    a, b = key
    pa = topo.midpoint_parent.get(a)
    if pa is not None and b in pa:
        return _ekey(*pa)
    pb = topo.midpoint_parent.get(b)
    if pb is not None and a in pb:
        return _ekey(*pb)
    return None


def _neighbors_across(topo, cid, local_edge):
    """Active cells facing `cid` across one of its edges; empty on the
    boundary.  Valid also in non-closed intermediate states, which the
    closure loop relies on."""
    key = _ekey(*_cell_edge_vertices(topo.cells, cid, local_edge))
    other = None
    for c in topo.edge2cells.get(key, ()):
        if c != cid:
            other = c
            break
    if other is not None:
        return _active_leaves_on(topo, other, key)
    parent_key = _parent_edge(topo, key)
    if parent_key is not None:
        anc = set(_ancestors(topo.cells, cid))
        for c in topo.edge2cells.get(parent_key, ()):
            if c != cid and c not in anc:
                return _active_leaves_on(topo, c, parent_key)
    return []


class Mesh:
    def __init__(self, vertices, cells, active, root_ids, midpoints,
                 midpoint_parent, edge2cells):
        self.vertices = vertices
        self.cells = cells
        self.active_cells = frozenset(active)
        self.active_ids = sorted(active)
        self.root_ids = root_ids
        self.midpoints = midpoints
        self.midpoint_parent = midpoint_parent
        self.edge2cells = edge2cells
        self._build_edges()

    @property
    def active(self):
        return self.active_cells

    # -- basic queries ------------------------------------------------

    def coords(self, vid):
        v = self.vertices[vid]
        return (v.x, v.y)

    def cell_rect(self, cid):
        """Return (x0, y0, hx, hy) of an axis-aligned cell."""
        c = self.cells[cid]
        v0 = self.vertices[c.vertex_ids[0]]
        v2 = self.vertices[c.vertex_ids[2]]
        return (v0.x, v0.y, v2.x - v0.x, v2.y - v0.y)

    def cell_area(self, cid):
        x0, y0, hx, hy = self.cell_rect(cid)
        return hx * hy

    def cell_center(self, cid):
        x0, y0, hx, hy = self.cell_rect(cid)
        return (x0 + 0.5 * hx, y0 + 0.5 * hy)

    def cell_diameter(self, cid):
        x0, y0, hx, hy = self.cell_rect(cid)
        return (hx * hx + hy * hy) ** 0.5

    @property
    def domain_area(self):
        return sum(self.cell_area(cid) for cid in self.root_ids)

    def cell_edge_vertices(self, cid, local_edge):
        return _cell_edge_vertices(self.cells, cid, local_edge)

    def ancestors(self, cid):
        return _ancestors(self.cells, cid)

    def neighbors_across(self, cid, local_edge):
        return _neighbors_across(self, cid, local_edge)

    # -- point location -----------------------------------------------

    def _rect_contains(self, cid, x, y, eps=1e-12):
        x0, y0, hx, hy = self.cell_rect(cid)
        return (x0 - eps * hx <= x <= x0 + hx + eps * hx
                and y0 - eps * hy <= y <= y0 + hy + eps * hy)

    def locate(self, x, y):
        """Return the id of the first active cell containing (x, y).

        Deterministic: roots are scanned in order, children in stored
        (counterclockwise) order, so points on cell interfaces always
        resolve to the same cell.
        """
        for rid in self.root_ids:
            if self._rect_contains(rid, x, y):
                cid = rid
                while self.cells[cid].children is not None:
                    for ch in self.cells[cid].children:
                        if self._rect_contains(ch, x, y):
                            cid = ch
                            break
                    else:
                        raise AssertionError("children do not cover parent")
                return cid
        raise DomainError(f"point ({x}, {y}) is outside the domain")

    # -- edge table (closed meshes only) --------------------------------

    def _build_edges(self):
        """Assemble the facet list and the per-(cell, edge) adjacency map."""
        facets = {}
        for cid in self.active_ids:
            for le in range(4):
                key = _ekey(*self.cell_edge_vertices(cid, le))
                facets.setdefault(key, []).append((cid, le))

        edges = []
        info = {}
        hanging = []
        for key in sorted(facets):
            owners = facets[key]
            if len(owners) == 2:
                (c1, e1), (c2, e2) = owners
                info[(c1, e1)] = ("conforming", c2)
                info[(c2, e2)] = ("conforming", c1)
                edges.append(Edge(key, (c1, c2), None))
                continue
            (cid, le), = owners
            m = self.midpoints.get(key)
            if m is not None:
                # coarse side of a hanging interface
                a, b = key
                f1 = self._fine_owner(_ekey(a, m), facets)
                f2 = self._fine_owner(_ekey(m, b), facets)
                info[(cid, le)] = ("coarse_hanging", (f1, f2), m)
                edges.append(Edge(key, (cid, f1, f2), m))
                hanging.append((m, key, cid, (f1, f2)))
                continue
            parent_key = _parent_edge(self, key)
            if parent_key is not None:
                anc = set(self.ancestors(cid))
                coarse = None
                for c in self.edge2cells.get(parent_key, ()):
                    if c != cid and c not in anc:
                        coarse = c
                        break
                if coarse is not None:
                    info[(cid, le)] = ("fine_half", coarse)
                    continue
            tag = self.cells[cid].boundary_tags[le]
            info[(cid, le)] = ("boundary", tag)
            edges.append(Edge(key, (cid,), None, tag))

        self.edges = edges
        self.edge_info = info
        self.hanging_nodes = sorted(hanging)

    def _fine_owner(self, key, facets):
        owners = facets.get(key, ())
        if len(owners) != 1:
            raise AssertionError("hanging interface is not one-irregular")
        return owners[0][0]

    # -- invariant audits -----------------------------------------------

    def audit(self):
        """Exhaustive consistency scan; raises AssertionError on violation.

        Checks the one-irregular rule edge by edge (geometrically, against
        every mesh vertex), the active tiling of the domain and symmetric
        adjacency.  Meant for tests and debug runs, not the hot path.
        """
        area = sum(self.cell_area(c) for c in self.active_ids)
        assert abs(area - self.domain_area) <= 1e-12 * self.domain_area
        counts = {}
        for cid in self.active_ids:
            for le in range(4):
                a, b = self.cell_edge_vertices(cid, le)
                ax, ay = self.coords(a)
                bx, by = self.coords(b)
                count = 0
                for v in self.vertices:
                    if v.id in (a, b):
                        continue
                    if self._on_segment(ax, ay, bx, by, v.x, v.y):
                        count += 1
                counts[(cid, le)] = count
                assert count <= 1, (
                    f"edge ({a},{b}) of cell {cid} has {count} hanging vertices")
        for (cid, le), rec in self.edge_info.items():
            if rec[0] == "conforming":
                back = [r for (c, e), r in self.edge_info.items()
                        if c == rec[1] and r[0] == "conforming" and r[1] == cid]
                assert back, "asymmetric conforming adjacency"
        return counts

    @staticmethod
    def _on_segment(ax, ay, bx, by, px, py, tol=1e-12):
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        scale = max(abs(bx - ax), abs(by - ay))
        if abs(cross) > tol * scale:
            return False
        dot = (px - ax) * (bx - ax) + (py - ay) * (by - ay)
        l2 = (bx - ax) ** 2 + (by - ay) ** 2
        return tol * l2 < dot < (1 - tol) * l2


# ---------------------------------------------------------------------------
# constructors


def create_rect_grid(nx, ny, lower=(0.0, 0.0), upper=(1.0, 1.0)):
    """Uniform nx-by-ny grid of level-0 cells on [lower, upper].

    Boundary tags: 1 bottom, 2 right, 3 top, 4 left.
    """
    if nx < 1 or ny < 1:
        raise DomainError("nx and ny must be at least 1")
    if not (lower[0] < upper[0] and lower[1] < upper[1]):
        raise DomainError("degenerate bounds: need lower < upper componentwise")

    xs = [lower[0] + (upper[0] - lower[0]) * i / nx for i in range(nx + 1)]
    ys = [lower[1] + (upper[1] - lower[1]) * j / ny for j in range(ny + 1)]
    vertices = []
    vid = {}
    for j in range(ny + 1):
        for i in range(nx + 1):
            vid[(i, j)] = len(vertices)
            vertices.append(Vertex(len(vertices), xs[i], ys[j]))

    cells = []
    for j in range(ny):
        for i in range(nx):
            tags = (1 if j == 0 else 0, 2 if i == nx - 1 else 0,
                    3 if j == ny - 1 else 0, 4 if i == 0 else 0)
            cells.append(Cell(len(cells),
                              (vid[(i, j)], vid[(i + 1, j)],
                               vid[(i + 1, j + 1)], vid[(i, j + 1)]),
                              level=0, boundary_tags=tags))
    return _from_roots(vertices, cells)


def create_lshape():
    """Three unit cells tiling (-1,1)^2 minus [0,1]x[-1,0].

    The reentrant corner sits at the origin.  All boundary edges carry
    tag 1.
    """
    pts = [(-1, -1), (0, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
    vertices = [Vertex(i, float(x), float(y)) for i, (x, y) in enumerate(pts)]
    quads = [(0, 1, 3, 2), (2, 3, 6, 5), (3, 4, 7, 6)]
    cells = [Cell(i, q, level=0) for i, q in enumerate(quads)]
    probe = _from_roots(vertices, cells)
    for (cid, le), rec in probe.edge_info.items():
        if rec[0] == "boundary":
            tags = list(cells[cid].boundary_tags)
            tags[le] = 1
            cells[cid].boundary_tags = tuple(tags)
    return _from_roots(vertices, cells)


def _from_roots(vertices, cells):
    edge2cells = {}
    for c in cells:
        for le in range(4):
            key = _ekey(*_cell_edge_vertices(cells, c.id, le))
            edge2cells.setdefault(key, []).append(c.id)
    return Mesh(vertices, cells, {c.id for c in cells}, [c.id for c in cells],
                {}, {}, edge2cells)


# ---------------------------------------------------------------------------
# refinement


class _Workspace:
    """Mutable copy of a mesh used while refining; frozen back into a Mesh."""

    def __init__(self, mesh):
        self.vertices = list(mesh.vertices)
        self.cells = [Cell(c.id, c.vertex_ids, c.level, c.parent, c.children,
                           c.boundary_tags) for c in mesh.cells]
        self.active = set(mesh.active_cells)
        self.root_ids = list(mesh.root_ids)
        self.midpoints = dict(mesh.midpoints)
        self.midpoint_parent = dict(mesh.midpoint_parent)
        self.edge2cells = {k: list(v) for k, v in mesh.edge2cells.items()}

    def _midpoint(self, a, b):
        key = _ekey(a, b)
        m = self.midpoints.get(key)
        if m is None:
            va, vb = self.vertices[a], self.vertices[b]
            m = len(self.vertices)
            self.vertices.append(Vertex(m, 0.5 * (va.x + vb.x), 0.5 * (va.y + vb.y)))
            self.midpoints[key] = m
            self.midpoint_parent[m] = key
        return m

    def split(self, cid):
        c = self.cells[cid]
        v0, v1, v2, v3 = c.vertex_ids
        m01 = self._midpoint(v0, v1)
        m12 = self._midpoint(v1, v2)
        m23 = self._midpoint(v2, v3)
        m30 = self._midpoint(v3, v0)
        va, vc = self.vertices[v0], self.vertices[v2]
        ctr = len(self.vertices)
        self.vertices.append(Vertex(ctr, 0.5 * (va.x + vc.x), 0.5 * (va.y + vc.y)))

        t0, t1, t2, t3 = c.boundary_tags
        child_defs = [
            ((v0, m01, ctr, m30), (t0, 0, 0, t3)),
            ((m01, v1, m12, ctr), (t0, t1, 0, 0)),
            ((ctr, m12, v2, m23), (0, t1, t2, 0)),
            ((m30, ctr, m23, v3), (0, 0, t2, t3)),
        ]
        child_ids = []
        for verts, tags in child_defs:
            nid = len(self.cells)
            child_ids.append(nid)
            self.cells.append(Cell(nid, verts, c.level + 1, parent=cid,
                                   boundary_tags=tags))
            for le in range(4):
                key = _ekey(*_cell_edge_vertices(self.cells, nid, le))
                self.edge2cells.setdefault(key, []).append(nid)
        c.children = tuple(child_ids)
        self.active.discard(cid)
        self.active.update(child_ids)

    def closure_violations(self):
        out = []
        for cid in sorted(self.active):
            lvl = self.cells[cid].level
            for le in range(4):
                if any(self.cells[n].level >= lvl + 2
                       for n in _neighbors_across(self, cid, le)):
                    out.append(cid)
                    break
        return out

    def freeze(self):
        return Mesh(self.vertices, self.cells, self.active, self.root_ids,
                    self.midpoints, self.midpoint_parent, self.edge2cells)


def refine_with_closure(mesh, marked):
    """Refine the marked active cells and restore one-irregularity.

    Closure rule: any active cell with a neighbor two or more levels finer
    across one of its edges is refined too, in ascending cell-id order,
    until a fixed point is reached.
    """
    marked = set(marked)
    if not marked <= mesh.active_cells:
        raise UsageError("marked cells must be active")

    ws = _Workspace(mesh)
    for cid in sorted(marked):
        ws.split(cid)

    # fixed-point closure; the cell count bounds the number of sweeps
    for _ in range(len(ws.cells) + 1):
        violations = ws.closure_violations()
        if not violations:
            return ws.freeze()
        for cid in violations:
            ws.split(cid)
    raise AssertionError("closure did not terminate")


def uniform_refine(mesh, times=1):
    """Refine every active cell, `times` times."""
    for _ in range(times):
        mesh = refine_with_closure(mesh, mesh.active_cells)
    return mesh


def sibling_patch(mesh, cid):
    """The 4 children of `cid`'s parent if all are active leaves, else None."""
    if cid not in mesh.active_cells:
        raise UsageError(f"cell {cid} is not active")
    parent = mesh.cells[cid].parent
    if parent is None:
        return None
    siblings = mesh.cells[parent].children
    if all(s in mesh.active_cells for s in siblings):
        return siblings
    return None
