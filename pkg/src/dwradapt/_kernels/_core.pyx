# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CSR kernels.

These are the hot inner loops of the iterative solvers: every CG/GMRES
iteration and every inverse-iteration step is dominated by sparse
matrix-vector products.  A pure-numpy fallback with identical semantics
lives in ``_fallback.py``; the backend is chosen at import time in
``dwradapt._kernels``.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def csr_matvec(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
               double[::1] data, double[::1] x):
    """Return A @ x for a CSR matrix given by (indptr, indices, data)."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        y[i] = acc
    return out


def csr_matvec_transpose(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
                         double[::1] data, double[::1] x, Py_ssize_t n_cols):
    """Return A.T @ x without forming the transpose."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.zeros(n_cols, dtype=np.float64)
    cdef double[::1] y = out
    cdef Py_ssize_t i, k
    cdef double xi
    for i in range(n):
        xi = x[i]
        if xi != 0.0:
            for k in range(indptr[i], indptr[i + 1]):
                y[indices[k]] += data[k] * xi
    return out
