"""Pure-numpy implementations of the CSR kernels.

Used when the compiled extension is unavailable or when
``DWRADAPT_PURE_PYTHON`` is set.  Semantics match ``_core`` exactly;
only speed differs (see benchmarks/bench_kernels.py).
"""

import numpy as np


def _row_ids(indptr):
    n = indptr.shape[0] - 1
    return np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))


def csr_matvec(indptr, indices, data, x):
    products = data * x[indices]
    # bincount handles empty rows correctly, unlike add.reduceat
    return np.bincount(_row_ids(indptr), weights=products,
                       minlength=indptr.shape[0] - 1)


def csr_matvec_transpose(indptr, indices, data, x, n_cols):
    products = data * np.repeat(x, np.diff(indptr))
    return np.bincount(indices, weights=products, minlength=n_cols)
