"""dwradapt: goal-oriented adaptive finite elements.

Estimates the discretization error of user-chosen output functionals by
weighting primal/dual residuals with adjoint sensitivities, and drives
quadrilateral mesh adaptation by error balancing.  Covers variational
equations, linear-quadratic boundary control and generalized eigenvalue
problems on scalar model problems.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
