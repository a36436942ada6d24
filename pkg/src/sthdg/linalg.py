"""Sparse and dense factorizations used by the solvers.

The sparse direct solver is SuperLU (through scipy) with a fixed
minimum-degree ordering on the symmetrised pattern.  The condensed HDG
matrices are structurally symmetric, for which this ordering gives far less
fill than the default column ordering.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a factorization meets a zero pivot."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class SparseMatrix:
    """Triplet accumulator; duplicates are summed by :meth:`finalize`."""

    def __init__(self, shape, dtype=float, symmetric: bool = False):
        self.shape = tuple(shape)
        self.dtype = dtype
        self.symmetric = symmetric
        self._rows, self._cols, self._vals = [], [], []

    def add(self, rows, cols, vals):
        self._rows.append(np.ravel(rows))
        self._cols.append(np.ravel(cols))
        self._vals.append(np.ravel(vals).astype(self.dtype, copy=False))

    def finalize(self) -> sp.csc_matrix:
        if not self._rows:
            return sp.csc_matrix(self.shape, dtype=self.dtype)
        r = np.concatenate(self._rows)
        c = np.concatenate(self._cols)
        v = np.concatenate(self._vals)
        A = sp.csc_matrix((v, (r, c)), shape=self.shape)
        A.sum_duplicates()
        return A


@dataclass
class SparseFactorization:
    lu: spla.SuperLU
    shape: tuple

    @property
    def fill(self) -> int:
        return int(self.lu.L.nnz + self.lu.U.nnz)


def _zero_line(A) -> int | None:
    A = sp.csr_matrix(A)
    empty = np.flatnonzero(np.diff(A.indptr) == 0)
    if len(empty):
        return int(empty[0])
    empty = np.flatnonzero(np.diff(sp.csc_matrix(A).indptr) == 0)
    return int(empty[0]) if len(empty) else None


def factor_sparse(A, pivot_threshold: float = 0.01) -> SparseFactorization:
    """LU-factorize a square sparse matrix with a fixed fill-reducing ordering.

    Diagonal pivots are preferred unless they fall below ``pivot_threshold``
    times the column maximum; a large threshold destroys the ordering on
    saddle-point matrices whose facet-pressure diagonal is small.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    row = _zero_line(A)
    if row is not None:
        raise SingularMatrixError(f"structurally singular: empty row/column {row}", row)
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=pivot_threshold,
                       options=dict(SymmetricMode=True))
    except RuntimeError as exc:
        raise SingularMatrixError(f"sparse factorization failed: {exc}") from exc
    piv = np.abs(lu.U.diagonal())
    scale = max(abs(A).max(), 1e-300)
    bad = np.flatnonzero(piv <= 1e-14 * scale)
    if len(bad):
        r = int(lu.perm_c[bad[0]])
        raise SingularMatrixError(f"numerically singular: zero pivot at column {r}", r)
    return SparseFactorization(lu, A.shape)


def solve(fact, b):
    """Solve with a :class:`SparseFactorization` or :class:`DenseFactorization`."""
    b = np.asarray(b)
    if isinstance(fact, DenseFactorization):
        return fact.solve(b)
    if np.iscomplexobj(b) and not np.iscomplexobj(fact.lu.U.data):
        return fact.lu.solve(b.real) + 1j * fact.lu.solve(b.imag)
    return fact.lu.solve(b)


@dataclass
class DenseFactorization:
    """Partially pivoted LU of a dense matrix."""

    lu: np.ndarray
    piv: np.ndarray

    @classmethod
    def factor(cls, A) -> "DenseFactorization":
        A = np.asarray(A)
        with warnings.catch_warnings():
            # singularity is reported below with the offending row
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(A, check_finite=True)
        d = np.abs(np.diag(lu))
        bad = np.flatnonzero(d <= 1e-14 * max(np.abs(A).max(), 1e-300))
        if len(bad):
            raise SingularMatrixError(f"zero pivot at row {bad[0]}", int(bad[0]))
        return cls(lu, piv)

    def solve(self, b):
        return sla.lu_solve((self.lu, self.piv), b)

    def reconstruct(self) -> np.ndarray:
        n = self.lu.shape[0]
        L = np.tril(self.lu, -1) + np.eye(n)
        U = np.triu(self.lu)
        P = np.eye(n)
        for i, p in enumerate(self.piv):
            P[[i, p]] = P[[p, i]]
        return P.T @ L @ U


def min_singular_value(A) -> float:
    try:
        s = sla.svdvals(np.asarray(A, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD did not converge: {exc}") from exc
    if min(np.shape(A)) == 0:
        raise ValueError("empty matrix")
    return float(s[-1])


def inverse_sqrt_spd(M) -> np.ndarray:
    """M^{-1/2} of a dense symmetric positive definite matrix."""
    w, V = np.linalg.eigh(np.asarray(M, dtype=float))
    if w.min() <= 0.0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return (V / np.sqrt(w)) @ V.T


def generalized_min_singular_value(B, Mrow, Mcol) -> float:
    """Smallest singular value of ``Mrow^{-1/2} B Mcol^{-1/2}``."""
    return min_singular_value(inverse_sqrt_spd(Mrow) @ np.asarray(B) @ inverse_sqrt_spd(Mcol))


def batched_inverse(A: np.ndarray) -> np.ndarray:
    """Inverse of a stack of small dense matrices, with a pivot check."""
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        for i, Ai in enumerate(A):
            try:
                np.linalg.inv(Ai)
            except np.linalg.LinAlgError:
                raise SingularMatrixError(f"local block {i} is singular", i) from exc
        raise
