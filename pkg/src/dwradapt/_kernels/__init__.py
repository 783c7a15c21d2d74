"""Kernel backend selection.

The compiled extension is preferred; set ``DWRADAPT_PURE_PYTHON=1`` to
force the numpy fallback (useful for debugging and benchmarking).
"""

import os

from . import _fallback

if os.environ.get("DWRADAPT_PURE_PYTHON"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

csr_matvec = _impl.csr_matvec
csr_matvec_transpose = _impl.csr_matvec_transpose
