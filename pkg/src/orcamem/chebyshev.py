"""Chebyshev collocation on [0, 1] for the z-propagation of the signal."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def nodes(n: int) -> np.ndarray:
    """Gauss-Lobatto points ordered from z=0 to z=1."""
    k = np.arange(n)
    return (1 - np.cos(np.pi * k / (n - 1))) / 2


@lru_cache(maxsize=None)
def diff_matrix(n: int) -> np.ndarray:
    """d/dz on the nodes of :func:`nodes` (Trefethen's construction, rescaled)."""
    N = n - 1
    x = np.cos(np.pi * np.arange(n) / N)
    c = np.ones(n)
    c[0] = c[-1] = 2
    c *= (-1) ** np.arange(n)
    X = np.tile(x, (n, 1)).T
    dX = X - X.T
    D = np.outer(c, 1 / c) / (dX + np.eye(n))
    D -= np.diag(D.sum(axis=1))
    return -2 * D


@lru_cache(maxsize=None)
def quad_weights(n: int) -> np.ndarray:
    """Clenshaw-Curtis weights for integrals over [0, 1]."""
    x = 1 - 2 * nodes(n)
    V = np.polynomial.chebyshev.chebvander(x, n - 1)
    m = np.arange(n)
    moments = np.where(m % 2 == 0, 2.0 / (1.0 - m.astype(float) ** 2 + (m % 2 == 1)), 0.0)
    return np.linalg.solve(V.T, moments) / 2


def boundary_solver(n: int, M: np.ndarray):
    """Precompute the solution operator of dE/dz = M E + s(z), E(0) = E_in.

    ``M`` is a (nQ, nQ) z-independent matrix. Returns ``(P_in, P_src)`` such that
    the stacked solution E (n, nQ) equals ``P_in @ E_in + P_src @ s[1:]`` with the
    leading two axes flattened.
    """
    nQ = M.shape[0]
    D = diff_matrix(n)
    L = np.kron(D, np.eye(nQ)) - np.kron(np.eye(n), M)
    L = L.astype(complex)
    L[:nQ, :] = 0
    L[:nQ, :nQ] = np.eye(nQ)
    Linv = np.linalg.inv(L)
    return Linv[:, :nQ], Linv[:, nQ:]
