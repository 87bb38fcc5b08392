"""Sparse direct solves for the Newton and interior-point systems.

Factorization is SuperLU with partial pivoting. The COLAMD column ordering
is computed on the first matrix seen for a given sparsity pattern and reused
afterwards with a natural-order factorization of the pre-permuted matrix.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# dense pivot search is only attempted below this size
_DENSE_DIAGNOSIS_LIMIT = 4000


class SingularityReport(ArithmeticError):
    """Factorization failed; ``pivot`` is the first zero pivot column or -1 if unknown."""

    def __init__(self, pivot: int, message: str = ""):
        self.pivot = pivot
        super().__init__(message or f"singular matrix (pivot {pivot})")


@dataclass
class SparseSystem:
    matrix: sp.csc_matrix
    rhs: np.ndarray

    def __post_init__(self):
        self.matrix = sp.csc_matrix(self.matrix)
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        self.rhs = np.asarray(self.rhs, dtype=float)
        n, m = self.matrix.shape
        if n != m or n == 0:
            raise ValueError(f"system matrix must be square and non-empty, got {self.matrix.shape}")
        if self.rhs.shape != (n,):
            raise ValueError("right-hand side length does not match matrix dimension")

    @classmethod
    def from_triplets(cls, n, rows, cols, vals, rhs) -> "SparseSystem":
        return cls(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)), rhs)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


def _pattern_key(A: sp.csc_matrix) -> str:
    h = hashlib.sha1()
    h.update(np.asarray(A.shape, dtype=np.int64).tobytes())
    h.update(A.indptr.astype(np.int64).tobytes())
    h.update(A.indices.astype(np.int64).tobytes())
    return h.hexdigest()


def _locate_pivot(A: sp.csc_matrix) -> int:
    if A.shape[0] > _DENSE_DIAGNOSIS_LIMIT:
        return -1
    _, _, u = scipy.linalg.lu(A.toarray())
    d = np.abs(np.diag(u))
    scale = max(1.0, float(np.abs(u).max()))
    bad = np.flatnonzero(d <= 1e-14 * scale)
    return int(bad[0]) if bad.size else -1


class LinearSolver:
    """Reusable solver that caches one column ordering per sparsity pattern."""

    def __init__(self):
        self._orderings: dict = {}
        self.symbolic_reuses = 0

    def factor(self, A) -> "Factorization":
        A = sp.csc_matrix(A)
        A.sum_duplicates()
        A.sort_indices()
        key = _pattern_key(A)
        q = self._orderings.get(key)
        try:
            if q is None:
                lu = spla.splu(A, permc_spec="COLAMD")
                q = np.argsort(lu.perm_c)
                self._orderings[key] = q
                return Factorization(lu, None, A)
            self.symbolic_reuses += 1
            lu = spla.splu(A[:, q], permc_spec="NATURAL")
            return Factorization(lu, q, A)
        except RuntimeError as exc:
            raise SingularityReport(_locate_pivot(A), f"factorization failed: {exc}") from None

    def solve(self, A, b) -> np.ndarray:
        return self.factor(A).solve(b)


class Factorization:
    def __init__(self, lu, q, A):
        self._lu = lu
        self._q = q
        self._A = A

    def solve(self, b, refine: int = 2) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        x = self._raw(b)
        scale = max(1.0, float(np.abs(b).max(initial=0.0)))
        for _ in range(refine):
            r = b - self._A @ x
            if np.abs(r).max(initial=0.0) <= 1e-14 * scale:
                break
            x = x + self._raw(r)
        if not np.all(np.isfinite(x)):
            raise SingularityReport(_locate_pivot(self._A), "non-finite solution")
        return x

    def _raw(self, b):
        y = self._lu.solve(b)
        if self._q is None:
            return y
        x = np.empty_like(y)
        x[self._q] = y
        return x


def factor_solve(system: SparseSystem, solver: LinearSolver | None = None) -> np.ndarray:
    """Solve ``A x = b``; raises SingularityReport when A cannot be factored."""
    solver = solver or LinearSolver()
    return solver.solve(system.matrix, system.rhs)
