"""Finite element spaces, assembly and recovery on hanging-node meshes."""

from .assemble import (FormDescriptor, FormTerm, apply_dirichlet,
                       assemble_functional, assemble_load, assemble_operator,
                       assemble_semilinear_vector, batch_eval,
                       boundary_edges, cell_quadrature, condense_vector,
                       dirichlet_dofs_and_values, edge_quadrature,
                       scatter_condensed, segment_quadrature)
from .recovery import patch_recover
from .space import (FeFunction, FeSpace, build_broken_space, build_space,
                    enforce_constraints, eval_in_cells, evaluate,
                    evaluate_in_cell, interpolate_function, local_coords,
                    nodal_interpolate, zero_function)

__all__ = [
    "FormDescriptor", "FormTerm", "apply_dirichlet", "assemble_functional",
    "assemble_load", "assemble_operator", "assemble_semilinear_vector",
    "batch_eval", "boundary_edges", "cell_quadrature", "condense_vector",
    "dirichlet_dofs_and_values", "edge_quadrature", "scatter_condensed",
    "segment_quadrature", "patch_recover", "FeFunction", "FeSpace",
    "build_broken_space", "build_space", "enforce_constraints",
    "eval_in_cells", "evaluate", "evaluate_in_cell", "interpolate_function",
    "local_coords", "nodal_interpolate", "zero_function",
]
