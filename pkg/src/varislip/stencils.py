"""Finite-difference operators on masked tensor lattices.

Both the solid reference grid (nodes) and the fluid lattice (active cells)
use these builders. Operators act on the vector of masked entries, ordered
by ``np.nonzero(mask)`` (row-major in ``(i, j)``).
"""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from math import comb, factorial

import numpy as np
import scipy.sparse as sp


@lru_cache(maxsize=None)
def fd_weights(offsets: tuple, order: int) -> np.ndarray:
    """Weights ``w`` with ``sum_j w_j u(o_j) ~ u^(order)(0)`` for unit spacing.

    Solved in exact rational arithmetic, so dyadic weights are exact floats.
    """
    n = len(offsets)
    # rows: sum_j w_j o_j^p = p! [p == order]
    A = [[Fraction(o) ** p for o in offsets] + [Fraction(factorial(order) if p == order else 0)] for p in range(n)]
    for c in range(n):
        piv = next(r for r in range(c, n) if A[r][c] != 0)
        A[c], A[piv] = A[piv], A[c]
        for r in range(n):
            if r != c and A[r][c] != 0:
                f = A[r][c] / A[c][c]
                A[r] = [x - f * y for x, y in zip(A[r], A[c])]
    w = np.array([float(A[i][n] / A[i][i]) for i in range(n)])
    w.flags.writeable = False
    return w


def _runs(line: np.ndarray):
    """Start and stop indices of consecutive True runs in a 1D bool array."""
    d = np.diff(np.concatenate([[0], line.astype(np.int8), [0]]))
    return np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]


def axis_derivative(mask: np.ndarray, axis: int, order: int, spacing: float) -> sp.csr_matrix:
    """Sparse derivative of the given order along one lattice axis.

    Centered stencils of half-width ``(order + 1) // 2`` are used where they
    fit inside a run of masked entries. Near run ends a one-sided window of
    ``order + 2`` points (or the whole run if shorter) is used. Rows of runs
    shorter than ``order + 1`` points are zero.
    """
    mask = np.asarray(mask, dtype=bool)
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(mask.sum())
    n = int(mask.sum())
    if order == 0:
        return sp.identity(n, format="csr")
    scale = spacing ** (-order)
    r = (order + 1) // 2
    center = tuple(range(-r, r + 1))
    wc = fd_weights(center, order) * scale
    rows, cols, vals = [], [], []
    other = mask.shape[1 - axis]
    for k in range(other):
        line = mask[:, k] if axis == 0 else mask[k, :]
        ids_line = index[:, k] if axis == 0 else index[k, :]
        for s, e in zip(*_runs(line)):
            L = e - s
            ids = ids_line[s:e]
            if L < order + 1:
                continue
            if L >= 2 * r + 1:
                p = np.arange(r, L - r)
                for o, w in zip(center, wc):
                    rows.append(ids[p])
                    cols.append(ids[p + o])
                    vals.append(np.full(len(p), w))
                edge = list(range(r)) + list(range(L - r, L))
            else:
                edge = list(range(L))
            npts = min(order + 2, L)
            for p in edge:
                lo = min(max(p - npts // 2, 0), L - npts)
                offs = tuple(range(lo - p, lo - p + npts))
                w = fd_weights(offs, order) * scale
                rows.append(np.full(npts, ids[p]))
                cols.append(ids[p + np.asarray(offs)])
                vals.append(w)
    if rows:
        A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
    else:
        A = sp.coo_matrix((n, n))
    return A.tocsr()


class LatticeOperators:
    """Cache of derivative operators on a masked lattice.

    Parameters
    ----------
    mask : (nx, ny) bool array of entries that carry unknowns.
    hx, hy : lattice spacings.
    """

    def __init__(self, mask, hx, hy):
        self.mask = np.asarray(mask, dtype=bool)
        self.hx = float(hx)
        self.hy = float(hy)
        self.n = int(self.mask.sum())
        self._cache = {}

    def axis(self, axis: int, order: int) -> sp.csr_matrix:
        key = ("axis", axis, order)
        if key not in self._cache:
            h = self.hx if axis == 0 else self.hy
            self._cache[key] = axis_derivative(self.mask, axis, order, h)
        return self._cache[key]

    def mixed(self, ox: int, oy: int) -> sp.csr_matrix:
        """Operator for the derivative of order ``ox`` in x and ``oy`` in y."""
        key = ("mixed", ox, oy)
        if key not in self._cache:
            if ox == 0:
                A = self.axis(1, oy)
            elif oy == 0:
                A = self.axis(0, ox)
            else:
                A = (self.axis(0, ox) @ self.axis(1, oy)).tocsr()
            self._cache[key] = A
        return self._cache[key]

    def gradient_family(self, order: int):
        """List of ``(operator, multiplicity)`` pairs spanning ``D^order``.

        The multiplicities are binomial coefficients, so that summing
        ``mult * (op u)**2`` gives the full tensor norm of the derivative.
        """
        return [(self.mixed(order - j, j), float(comb(order, j))) for j in range(order + 1)]

    def seminorm_matrix(self, order: int, weights) -> sp.csr_matrix:
        """Matrix ``K`` with ``u^T K u = sum_p w_p |D^order u|_p^2`` for scalars."""
        w = sp.diags(np.asarray(weights, dtype=float))
        K = None
        for op, m in self.gradient_family(order):
            term = m * (op.T @ w @ op)
            K = term if K is None else K + term
        return K.tocsr()
