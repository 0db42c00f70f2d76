"""1D polynomial nodes, quadrature, and Lagrange evaluation helpers.

Shared between the mesh geometry maps and the approximation spaces.
All point sets live on the reference interval [-1, 1].
"""
from __future__ import annotations

import numpy as np
from numpy.polynomial import legendre as npleg


def gauss_points(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points/weights on [-1,1], exact for degree 2n-1."""
    if n < 1:
        raise ValueError(f"need at least one quadrature point, got {n}")
    x, w = npleg.leggauss(n)
    return x, w


def lobatto_points(n: int) -> np.ndarray:
    """n Gauss-Lobatto points on [-1,1] (endpoints included for n >= 2)."""
    if n < 1:
        raise ValueError(f"need at least one node, got {n}")
    if n == 1:
        return np.array([0.0])
    if n == 2:
        return np.array([-1.0, 1.0])
    # interior nodes are the roots of P'_{n-1}
    coeff = np.zeros(n)
    coeff[-1] = 1.0
    interior = npleg.Legendre(coeff).deriv().roots()
    return np.concatenate(([-1.0], np.sort(interior.real), [1.0]))


class Lagrange1D:
    """Nodal Lagrange basis on a given 1D point set.

    Evaluation goes through a Legendre Vandermonde factorization, which is
    well conditioned for the modest degrees used here (k <= ~10).
    """

    def __init__(self, nodes: np.ndarray):
        self.nodes = np.asarray(nodes, dtype=float)
        self.n = len(self.nodes)
        self._vinv = np.linalg.inv(npleg.legvander(self.nodes, self.n - 1))

    def eval(self, pts) -> np.ndarray:
        """Matrix V with V[i, j] = l_j(pts[i])."""
        pts = np.atleast_1d(np.asarray(pts, dtype=float))
        return npleg.legvander(pts, self.n - 1) @ self._vinv

    def deriv(self, pts) -> np.ndarray:
        """Matrix D with D[i, j] = l_j'(pts[i])."""
        pts = np.atleast_1d(np.asarray(pts, dtype=float))
        dv = np.empty((len(pts), self.n))
        for j in range(self.n):
            c = np.zeros(self.n)
            c[j] = 1.0
            dv[:, j] = npleg.legval(pts, npleg.legder(c))
        return dv @ self._vinv


def lattice(nodes1d: np.ndarray, d: int) -> np.ndarray:
    """Tensor lattice of a 1D point set, first axis fastest; shape (n^d, d)."""
    n = len(nodes1d)
    idx = np.indices((n,) * d)[::-1].reshape(d, -1).T  # axis 0 fastest
    return nodes1d[idx]


def lattice_eval(basis: Lagrange1D, pts: np.ndarray) -> np.ndarray:
    """Tensor-product basis values at arbitrary d-dim points: (npts, n^d)."""
    pts = np.atleast_2d(pts)
    d = pts.shape[1]
    per_axis = [basis.eval(pts[:, a]) for a in range(d)]
    out = per_axis[0]
    for a in range(1, d):
        # lattice index i = i0 + n*i1 + n^2*i2 ... with axis 0 fastest
        out = (per_axis[a][:, :, None] * out[:, None, :]).reshape(len(pts), -1)
    return out


def lattice_grad(basis: Lagrange1D, pts: np.ndarray) -> np.ndarray:
    """Tensor-product basis gradients at d-dim points: (npts, n^d, d)."""
    pts = np.atleast_2d(pts)
    npts, d = pts.shape
    vals = [basis.eval(pts[:, a]) for a in range(d)]
    ders = [basis.deriv(pts[:, a]) for a in range(d)]
    n = basis.n
    out = np.empty((npts, n**d, d))
    for comp in range(d):
        acc = None
        for a in range(d):
            mat = ders[a] if a == comp else vals[a]
            acc = mat if acc is None else (mat[:, :, None] * acc[:, None, :]).reshape(npts, -1)
        out[:, :, comp] = acc
    return out
