"""Reference-element tabulation on the unit square [0,1]^2.

Q1/Q2 tensor-product Lagrange bases and Gauss-Legendre quadrature.  Node
ordering matches the mesh conventions: corners counterclockwise, then
(for Q2) edge nodes in the same edge order, then the center.
"""

from __future__ import annotations

import numpy as np

# 1D node coordinates per degree (index into _T below)
_T = np.array([0.0, 0.5, 1.0])
# 2D node -> (ix, iy) into _T
NODE_INDEX = {
    1: ((0, 0), (2, 0), (2, 2), (0, 2)),
    2: ((0, 0), (2, 0), (2, 2), (0, 2),
        (1, 0), (2, 1), (1, 2), (0, 1),
        (1, 1)),
}


def node_points(degree):
    """Reference coordinates of the local nodes, shape (ndpc, 2)."""
    idx = NODE_INDEX[degree]
    return np.array([[_T[i], _T[j]] for i, j in idx])


def _lag1(t):
    t = np.asarray(t, dtype=float)
    vals = np.stack([1.0 - t, np.full_like(t, np.nan), t])
    ders = np.stack([np.full_like(t, -1.0), np.full_like(t, np.nan),
                     np.full_like(t, 1.0)])
    curv = np.zeros_like(vals)
    return vals, ders, curv


def _lag2(t):
    t = np.asarray(t, dtype=float)
    vals = np.stack([2 * t * t - 3 * t + 1, 4 * t - 4 * t * t, 2 * t * t - t])
    ders = np.stack([4 * t - 3, 4 - 8 * t, 4 * t - 1])
    curv = np.stack([np.full_like(t, 4.0), np.full_like(t, -8.0),
                     np.full_like(t, 4.0)])
    return vals, ders, curv


def tabulate(degree, points):
    """Evaluate the basis at reference points.

    Returns (N, dN, d2N):
      N   (npts, ndpc)         values
      dN  (npts, ndpc, 2)      d/dxi, d/deta
      d2N (npts, ndpc, 3)      d2/dxi2, d2/deta2, d2/dxi deta
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lag = _lag1 if degree == 1 else _lag2
    vx, dx, cx = lag(pts[:, 0])
    vy, dy, cy = lag(pts[:, 1])
    idx = NODE_INDEX[degree]
    n, nd = pts.shape[0], len(idx)
    N = np.empty((n, nd))
    dN = np.empty((n, nd, 2))
    d2N = np.empty((n, nd, 3))
    for k, (i, j) in enumerate(idx):
        N[:, k] = vx[i] * vy[j]
        dN[:, k, 0] = dx[i] * vy[j]
        dN[:, k, 1] = vx[i] * dy[j]
        d2N[:, k, 0] = cx[i] * vy[j]
        d2N[:, k, 1] = vx[i] * cy[j]
        d2N[:, k, 2] = dx[i] * dy[j]
    return N, dN, d2N


def gauss_1d(n):
    """n-point Gauss-Legendre rule on [0,1]: (points, weights)."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_2d(n):
    """Tensor n-by-n Gauss rule on the unit square: (points (n*n,2), weights)."""
    x, w = gauss_1d(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    return np.column_stack([X.ravel(), Y.ravel()]), W.ravel()
