"""Patch-wise biquadratic recovery of Q1 functions.

On every intact 2x2 sibling patch the nine Q1 nodal values (parent
corners, parent edge midpoints, parent center) determine a unique
biquadratic; the recovered function is that biquadratic read into a
cell-wise Q2 space on the same cells.  Cells without an intact patch
(level-0 cells, patches broken by further refinement) copy the Q1 values,
so the recovery weight vanishes there -- a deliberate, conservative
under-estimation source.

The output space is discontinuous (independent dofs per cell): patch
polynomials agree along interfaces of intact patches but not across
hanging or broken-patch interfaces, and clamping them to a conforming
space would pollute the recovered values.
"""

from __future__ import annotations

import numpy as np

from ..errors import UsageError
from ..mesh import sibling_patch
from . import reference
from .space import FeFunction, build_broken_space

# parent-reference offset of each child quadrant, in child creation order
_CHILD_OFFSET = ((0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 0.5))


def _quad1d(t):
    """Quadratic Lagrange basis on nodes {0, 1/2, 1}, evaluated at t."""
    return np.stack([2 * t * t - 3 * t + 1, 4 * t - 4 * t * t, 2 * t * t - t],
                    axis=-1)


def patch_recover(fh):
    """Recover a Q1 function into a cell-wise Q2 function on the same mesh."""
    space = fh.space
    if space.degree != 1 or not space.continuous:
        raise UsageError("patch recovery expects a continuous Q1 function")
    mesh = space.mesh
    out_space = build_broken_space(mesh, 2)
    out = np.zeros(out_space.dof_count)
    nodes = reference.node_points(2)

    vdof = space.entity_dofs
    recovered_any = {}
    for row, cid in enumerate(mesh.active_ids):
        patch = sibling_patch(mesh, cid)
        dofs = out_space.cell_dofs[row]
        if patch is None:
            # copy: evaluate the bilinear at the 9 local nodes
            q1 = fh.coefficients[space.cell_dofs[space.cell_pos[cid]]]
            N1, _, _ = reference.tabulate(1, nodes)
            out[dofs] = N1 @ q1
            recovered_any[cid] = False
            continue
        parent = mesh.cells[cid].parent
        pv = mesh.cells[parent].vertex_ids
        mids = [mesh.midpoints[tuple(sorted(mesh.cell_edge_vertices(parent, le)))]
                for le in range(4)]
        center = mesh.cells[patch[0]].vertex_ids[2]
        # values on the 3x3 node lattice of the parent, [ix][iy] over {0,1/2,1}
        val = np.empty((3, 3))
        val[0, 0] = fh.coefficients[vdof[("v", pv[0])]]
        val[2, 0] = fh.coefficients[vdof[("v", pv[1])]]
        val[2, 2] = fh.coefficients[vdof[("v", pv[2])]]
        val[0, 2] = fh.coefficients[vdof[("v", pv[3])]]
        val[1, 0] = fh.coefficients[vdof[("v", mids[0])]]
        val[2, 1] = fh.coefficients[vdof[("v", mids[1])]]
        val[1, 2] = fh.coefficients[vdof[("v", mids[2])]]
        val[0, 1] = fh.coefficients[vdof[("v", mids[3])]]
        val[1, 1] = fh.coefficients[vdof[("v", center)]]

        quadrant = patch.index(cid)
        ox, oy = _CHILD_OFFSET[quadrant]
        px = ox + 0.5 * nodes[:, 0]
        py = oy + 0.5 * nodes[:, 1]
        lx = _quad1d(px)                       # (9, 3)
        ly = _quad1d(py)
        out[dofs] = np.einsum("ka,kb,ab->k", lx, ly, val)
        recovered_any[cid] = True

    result = FeFunction(out_space, out)
    result.recovered_cells = recovered_any
    return result
