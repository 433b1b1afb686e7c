"""Sparse symmetric positive-definite solves.

CHOLMOD (through cvxopt) is used when available. The fallback is a scipy
sparse LU, which is slower but has the same interface.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:
    from cvxopt import cholmod, matrix, spmatrix

    HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover
    HAVE_CHOLMOD = False


class NotPositiveDefinite(ArithmeticError):
    """The matrix handed to :class:`SPDSolver` is not positive definite."""


class SPDSolver:
    """Factor a sparse SPD matrix once and solve repeatedly.

    Parameters
    ----------
    K : sparse symmetric matrix.
    backend : "auto", "cholmod" or "scipy".
    """

    def __init__(self, K, backend: str = "auto"):
        K = sp.csc_matrix(K)
        self.n = K.shape[0]
        use_chol = HAVE_CHOLMOD and backend in ("auto", "cholmod")
        self.backend = "cholmod" if use_chol else "scipy"
        if use_chol:
            L = sp.tril(K).tocoo()
            Kc = spmatrix(
                matrix(np.ascontiguousarray(L.data, dtype=float)),
                matrix(L.row.astype(np.int64)),
                matrix(L.col.astype(np.int64)),
                (self.n, self.n),
            )
            try:
                self._F = cholmod.symbolic(Kc)
                cholmod.numeric(Kc, self._F)
            except ArithmeticError as exc:
                raise NotPositiveDefinite(str(exc)) from exc
        else:
            try:
                self._lu = spla.splu(K, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise NotPositiveDefinite(str(exc)) from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.backend == "cholmod":
            x = matrix(np.array(b, dtype=float, order="F").reshape(self.n, -1))
            cholmod.solve(self._F, x)
            return np.array(x).reshape(b.shape)
        return self._lu.solve(b)
