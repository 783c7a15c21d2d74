import numpy as np
import pytest

from dwradapt._kernels import _fallback
from dwradapt.linalg import SparseMatrix

try:
    from dwradapt._kernels import _core
except ImportError:
    _core = None

BACKENDS = [_fallback] + ([_core] if _core is not None else [])


def random_csr(rng, n=40, density=0.15):
    mask = rng.random((n, n)) < density
    np.fill_diagonal(mask, True)
    dense = np.where(mask, rng.standard_normal((n, n)), 0.0)
    rows, cols = np.nonzero(dense)
    return dense, SparseMatrix.from_coo(rows, cols, dense[rows, cols], (n, n))


@pytest.mark.parametrize("impl", BACKENDS)
def test_matvec_against_dense(impl):
    rng = np.random.default_rng(3)
    dense, A = random_csr(rng)
    x = rng.standard_normal(A.shape[1])
    y = impl.csr_matvec(A.indptr, A.indices, A.data, x)
    assert np.allclose(y, dense @ x, atol=1e-13)


@pytest.mark.parametrize("impl", BACKENDS)
def test_matvec_transpose_against_dense(impl):
    rng = np.random.default_rng(4)
    dense, A = random_csr(rng)
    x = rng.standard_normal(A.shape[0])
    y = impl.csr_matvec_transpose(A.indptr, A.indices, A.data, x, A.shape[1])
    assert np.allclose(y, dense.T @ x, atol=1e-13)


@pytest.mark.parametrize("impl", BACKENDS)
def test_empty_rows(impl):
    # rows without entries must yield zeros (reduceat-style bugs)
    A = SparseMatrix.from_coo([0, 3], [1, 2], [2.0, 5.0], (4, 4))
    y = impl.csr_matvec(A.indptr, A.indices, A.data,
                        np.array([1.0, 1.0, 1.0, 1.0]))
    assert y.tolist() == [2.0, 0.0, 0.0, 5.0]


@pytest.mark.skipif(_core is None, reason="compiled extension not built")
def test_backends_agree():
    rng = np.random.default_rng(5)
    dense, A = random_csr(rng, n=120)
    x = rng.standard_normal(A.shape[1])
    a = _core.csr_matvec(A.indptr, A.indices, A.data, x)
    b = _fallback.csr_matvec(A.indptr, A.indices, A.data, x)
    assert np.allclose(a, b, rtol=1e-14, atol=1e-14)
