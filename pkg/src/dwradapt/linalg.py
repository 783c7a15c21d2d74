"""Sparse storage and the iterative solver kernels.

CSR matrices with compiled matrix-vector products (see ``_kernels``),
Jacobi-preconditioned conjugate gradients, restarted GMRES, a damped
Newton driver and shift-invert inverse iteration for generalized
eigenproblems.  Everything is deterministic: fixed start vectors, no
randomization, factorization-free by design (shifted systems are
re-solved by GMRES in each inverse-iteration step).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import csr_matvec, csr_matvec_transpose
from .errors import ShiftRejectedError, UnsupportedSpectrumError

# running count of linear solves, keyed by method; used by structural
# tests ("the estimator performs no extra solves")
solve_counts = {"cg": 0, "gmres": 0}


@dataclass
class SparseMatrix:
    """Compressed sparse row matrix with sorted, unique column indices."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple

    @classmethod
    def from_coo(cls, rows, cols, vals, shape):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            new = np.empty(rows.size, dtype=bool)
            new[0] = True
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            group = np.cumsum(new) - 1
            vals = np.bincount(group, weights=vals)
            rows, cols = rows[new], cols[new]
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(indptr, np.ascontiguousarray(cols),
                   np.ascontiguousarray(vals), tuple(shape))

    @property
    def nnz(self):
        return int(self.indptr[-1])

    def matvec(self, x):
        return csr_matvec(self.indptr, self.indices, self.data,
                          np.ascontiguousarray(x, dtype=np.float64))

    def rmatvec(self, x):
        """Transpose product A.T @ x."""
        return csr_matvec_transpose(self.indptr, self.indices, self.data,
                                    np.ascontiguousarray(x, dtype=np.float64),
                                    self.shape[1])

    def __matmul__(self, x):
        return self.matvec(x)

    def transpose(self):
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64),
                         np.diff(self.indptr))
        return SparseMatrix.from_coo(self.indices, rows, self.data,
                                     (self.shape[1], self.shape[0]))

    def diagonal(self):
        d = np.zeros(min(self.shape))
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64),
                         np.diff(self.indptr))
        hit = rows == self.indices
        d[rows[hit]] = self.data[hit]
        return d

    def __add__(self, other):
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64),
                         np.diff(self.indptr))
        orows = np.repeat(np.arange(other.shape[0], dtype=np.int64),
                          np.diff(other.indptr))
        return SparseMatrix.from_coo(
            np.concatenate([rows, orows]),
            np.concatenate([self.indices, other.indices]),
            np.concatenate([self.data, other.data]), self.shape)

    def scaled(self, alpha):
        return SparseMatrix(self.indptr, self.indices, alpha * self.data,
                            self.shape)

    def submatrix(self, idx):
        """Square submatrix on the given (sorted) index set."""
        idx = np.asarray(idx, dtype=np.int64)
        keep = np.zeros(self.shape[0], dtype=bool)
        keep[idx] = True
        renum = np.full(self.shape[0], -1, dtype=np.int64)
        renum[idx] = np.arange(idx.size)
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64),
                         np.diff(self.indptr))
        hit = keep[rows] & keep[self.indices]
        return SparseMatrix.from_coo(renum[rows[hit]],
                                     renum[self.indices[hit]],
                                     self.data[hit], (idx.size, idx.size))

    def todense(self):
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out


@dataclass
class SolverReport:
    """Outcome of one solve.

    ``final_residual_norm`` is relative to the right-hand side for the
    linear solvers and absolute for Newton, matching each convergence
    criterion, so converged implies final_residual_norm <= tol.
    """

    iterations: int
    final_residual_norm: float
    converged: bool
    detail: str = ""
    history: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# conjugate gradients


def solve_cg(A, b, tol=1e-10, max_iter=None):
    """Jacobi-preconditioned CG for symmetric positive definite systems.

    Convergence: ||b - A x|| <= tol * ||b||.  Exceeding max_iter returns a
    non-converged report rather than raising.
    """
    solve_counts["cg"] += 1
    n = len(b)
    max_iter = max_iter if max_iter is not None else 20 * n + 100
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), SolverReport(0, 0.0, True)
    d = A.diagonal()
    inv_d = np.where(d != 0.0, 1.0 / np.where(d == 0.0, 1.0, d), 1.0)
    x = np.zeros(n)
    r = b.astype(float).copy()
    z = inv_d * r
    p = z.copy()
    rz = float(r @ z)
    history = [1.0]
    for k in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r)) / bnorm
        history.append(res)
        if res <= tol:
            return x, SolverReport(k, res, True, history=history)
        z = inv_d * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolverReport(max_iter, history[-1], False,
                           detail="max_iter exceeded", history=history)


# ---------------------------------------------------------------------------
# restarted GMRES


def solve_gmres(A, b, tol=1e-10, restart=50, max_iter=None, jacobi=False,
                x0=None):
    """Restarted GMRES with Givens rotations.

    Convergence is checked on the true relative residual ||b - A x||/||b||
    at the end of each cycle; ``jacobi`` row-scales the iteration (left
    preconditioning) without changing the convergence criterion.
    """
    solve_counts["gmres"] += 1
    n = len(b)
    restart = max(1, min(restart, n))
    max_iter = max_iter if max_iter is not None else 40 * n + 200
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), SolverReport(0, 0.0, True)
    if jacobi:
        d = A.diagonal()
        scale = np.where(d != 0.0, 1.0 / np.where(d == 0.0, 1.0, d), 1.0)
    else:
        scale = None

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    total = 0
    history = []
    prev_res = np.inf
    while True:
        r_true = b - (A @ x)
        res = float(np.linalg.norm(r_true)) / bnorm
        history.append(res)
        if res <= tol:
            return x, SolverReport(total, res, True, history=history)
        if total >= max_iter:
            return x, SolverReport(total, res, False,
                                   detail="max_iter exceeded", history=history)
        if res >= prev_res * (1.0 - 1e-13):
            return x, SolverReport(total, res, False, detail="stagnation",
                                   history=history)
        prev_res = res

        r = scale * r_true if jacobi else r_true
        beta = float(np.linalg.norm(r))
        V = np.empty((restart + 1, n))
        V[0] = r / beta
        H = np.zeros((restart + 1, restart))
        g = np.zeros(restart + 1)
        g[0] = beta
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        k = 0
        for j in range(restart):
            if total >= max_iter:
                break
            w = A @ V[j]
            total += 1
            if jacobi:
                w = scale * w
            for i in range(j + 1):
                H[i, j] = float(V[i] @ w)
                w -= H[i, j] * V[i]
            hbeta = float(np.linalg.norm(w))
            H[j + 1, j] = hbeta
            # previously accumulated rotations
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            rho = float(np.hypot(H[j, j], H[j + 1, j]))
            if rho == 0.0:
                k = j
                break
            cs[j] = H[j, j] / rho
            sn[j] = H[j + 1, j] / rho
            H[j, j] = rho
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            # |g[k]| estimates the (scaled) residual; hbeta == 0 is a lucky
            # breakdown and lands here with g[k] == 0
            if abs(g[j + 1]) <= 0.1 * tol * bnorm or hbeta == 0.0:
                break
            V[j + 1] = w / hbeta
        if k > 0:
            y = np.linalg.solve(np.triu(H[:k, :k]), g[:k])
            x = x + V[:k].T @ y


# ---------------------------------------------------------------------------
# Newton driver


def newton_solve(residual, jacobian, x0, tol=1e-10, max_iter=25,
                 linear_solver=None, max_halvings=10):
    """Damped Newton: step halving (at most 10) on residual non-decrease.

    Convergence: ||residual(x)||_2 <= tol (absolute).  Returns the iterate
    and a report; divergence yields a non-converged report, not an error.
    """
    x = np.asarray(x0, dtype=float).copy()
    if linear_solver is None:
        def linear_solver(J, r):
            return solve_gmres(J, r, tol=1e-12, restart=min(len(r), 200))

    history = []
    for k in range(max_iter + 1):
        r = residual(x)
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm)
        if rnorm <= tol:
            return x, SolverReport(k, rnorm, True, history=history)
        if k == max_iter:
            break
        J = jacobian(x)
        delta, lrep = linear_solver(J, r)
        if not lrep.converged:
            return x, SolverReport(k, rnorm, False,
                                   detail="inner linear solve failed",
                                   history=history)
        s = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            xn = x - s * delta
            if float(np.linalg.norm(residual(xn))) < rnorm:
                x = xn
                accepted = True
                break
            s *= 0.5
        if not accepted:
            return x, SolverReport(k, rnorm, False,
                                   detail="damping exhausted (divergence)",
                                   history=history)
    return x, SolverReport(max_iter, history[-1], False,
                           detail="max_iter exceeded", history=history)


# ---------------------------------------------------------------------------
# shift-invert inverse iteration


def _fix_sign(v):
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def eigen_pair(A, M, shift, adjoint=False, tol=1e-10, max_iter=80,
               inner_tol=None, restart=None, start=None):
    """Inverse iteration on (A - shift M) or its transpose.

    Deterministic all-ones start (``start`` overrides it, e.g. with a
    coarse-mesh eigenvector), Rayleigh-quotient eigenvalue
    lambda = (v.T A v)/(v.T M v), convergence when the eigenresidual
    ||A v - lambda M v|| <= tol * ||v||.  Real arithmetic only: an
    oscillating iteration (complex pair) raises UnsupportedSpectrumError,
    a near-singular shifted system raises ShiftRejectedError.
    """
    n = A.shape[0]
    B = A + M.scaled(-shift)
    if adjoint:
        B = B.transpose()
        Aop, Mop = A.transpose(), M.transpose()
    else:
        Aop, Mop = A, M
    inner_tol = inner_tol if inner_tol is not None else max(1e-12, 0.01 * tol)
    restart = restart if restart is not None else min(n, 300)

    if start is None:
        # all-ones with a tiny deterministic stagger: a plain ones vector
        # can be an exact eigenvector of small fixtures, trapping the
        # iteration on the wrong invariant subspace
        v = np.ones(n) + 1e-8 * np.arange(n)
        v /= np.linalg.norm(v)
    else:
        v = np.asarray(start, dtype=float)
        v = v / np.linalg.norm(v)
    y_prev = None
    v_prev = None
    drift_run = 0
    res_hist = []
    for k in range(1, max_iter + 1):
        rhs = Mop @ v
        y, rep = solve_gmres(B, rhs, tol=inner_tol, restart=restart,
                             max_iter=400 * restart, jacobi=True, x0=y_prev)
        if not rep.converged:
            raise ShiftRejectedError(
                f"shifted system did not solve (shift={shift}); "
                "shift may be (near) an eigenvalue", report=rep)
        ynorm = float(np.linalg.norm(y))
        if ynorm == 0.0:
            raise ShiftRejectedError("inverse iteration produced zero vector")
        v_prev, v = v, _fix_sign(y / ynorm)
        # warm start for the next shifted solve: previous solution magnitude
        # along the new iterate
        y_prev = v * float(v @ y)
        denom = float(v @ (Mop @ v))
        lam = float(v @ (Aop @ v)) / denom
        res = float(np.linalg.norm((Aop @ v) - lam * (Mop @ v)))
        res_hist.append(res)
        if res <= tol * float(np.linalg.norm(v)):
            return lam, v, SolverReport(k, res, True, history=res_hist)
        drift_run = drift_run + 1 if abs(float(v @ v_prev)) < 0.999 else 0
        if k >= 15 and drift_run >= 12 and res_hist[-1] > 0.5 * res_hist[-12]:
            # a real target aligns successive iterates; a strong rotation of
            # the direction persisting without residual decrease signals a
            # complex-conjugate pair
            raise UnsupportedSpectrumError(
                "iteration direction keeps rotating without residual "
                "decrease; target eigenvalue appears to be a complex pair")
    return lam, v, SolverReport(max_iter, res_hist[-1], False,
                                detail="max_iter exceeded", history=res_hist)
