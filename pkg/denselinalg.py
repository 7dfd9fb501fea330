#!/usr/bin/env python3
"""
Dense building blocks: interpolative decomposition, pivot-block factorizations
and block elimination with Schur complements.
"""
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

MACHINE_EPS = np.finfo(float).eps


class PivotError(ValueError):
    """Singular or indefinite pivot block"""

    def __init__(self, message: str, box_id: Optional[int] = None, level: Optional[int] = None):
        self.box_id = box_id
        self.level = level
        where = []
        if box_id is not None:
            where.append(f"box {box_id}")
        if level is not None:
            where.append(f"level {level}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass
class IDResult:
    """Column ID: M[:, redundant] ~= M[:, skeleton] @ interp"""
    skeleton: np.ndarray
    redundant: np.ndarray
    interp: np.ndarray  # |S| x |R|

    @property
    def rank(self) -> int:
        return len(self.skeleton)


def interp_decomp(M: np.ndarray, eps: float) -> IDResult:
    """
    Interpolative decomposition by greedy column-pivoted QR.

    The rank k is the number of leading R-diagonal entries above eps * |R_00|.
    A matrix without rows (or a zero matrix) has every column redundant.
    """
    M = np.asarray(M)
    if not np.issubdtype(M.dtype, np.inexact):
        M = M.astype(float)
    if M.ndim != 2:
        raise ValueError(f"Expected a 2D block, got shape {M.shape}")
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if not np.all(np.isfinite(M)):
        raise ValueError("Matrix contains NaN or Inf entries")

    m, n = M.shape
    if m == 0 or n == 0 or not np.any(M):
        return IDResult(
            skeleton=np.zeros(0, dtype=np.int64),
            redundant=np.arange(n, dtype=np.int64),
            interp=np.zeros((0, n), dtype=M.dtype),
        )

    R, perm = sla.qr(M, mode="r", pivoting=True)
    R = R[: min(m, n)]
    diag = np.abs(np.diag(R))
    small = np.flatnonzero(diag <= eps * diag[0])
    k = int(small[0]) if small.size else len(diag)

    if k == n:
        T = np.zeros((k, 0), dtype=R.dtype)
    elif k:
        T = sla.solve_triangular(R[:k, :k], R[:k, k:])
    else:
        T = np.zeros((0, n), dtype=R.dtype)
    return IDResult(
        skeleton=perm[:k].astype(np.int64),
        redundant=perm[k:].astype(np.int64),
        interp=T,
    )


class PivotFactor:
    """
    Factored square block: Cholesky X = C C* when spd, otherwise LU with
    partial pivoting (X[perm] = L U).
    """

    def __init__(self, X: np.ndarray, spd: bool = False):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[0] != X.shape[1]:
            raise ValueError(f"Pivot block must be square, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise PivotError("Pivot block contains NaN or Inf entries")
        self.spd = spd
        self.n = X.shape[0]
        self.dtype = X.dtype
        self.chol = None
        self.lu = None
        self.perm = None
        self.piv = None
        if self.n == 0:
            return
        scale = np.abs(X).max()
        if spd:
            try:
                self.chol = sla.cholesky(X, lower=True)
            except sla.LinAlgError as e:
                raise PivotError(f"Block of size {self.n} is not positive definite") from e
            if np.abs(np.diag(self.chol)).min() ** 2 <= MACHINE_EPS * scale:
                raise PivotError(f"Block of size {self.n} is numerically singular")
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self.lu, self.piv = sla.lu_factor(X)
            if np.abs(np.diag(self.lu)).min() <= MACHINE_EPS * scale:
                raise PivotError(f"Block of size {self.n} is numerically singular")
            perm = np.arange(self.n)
            for i, p in enumerate(self.piv):
                perm[i], perm[p] = perm[p], perm[i]
            self.perm = perm

    @classmethod
    def from_arrays(cls, spd: bool, chol=None, lu=None, piv=None) -> "PivotFactor":
        obj = cls.__new__(cls)
        obj.spd = spd
        obj.chol = chol
        obj.lu = lu
        obj.piv = piv
        obj.perm = None
        block = chol if spd else lu
        obj.n = 0 if block is None else block.shape[0]
        obj.dtype = np.float64 if block is None else block.dtype
        if piv is not None:
            perm = np.arange(obj.n)
            for i, p in enumerate(piv):
                perm[i], perm[p] = perm[p], perm[i]
            obj.perm = perm
        return obj

    @property
    def nbytes(self) -> int:
        if self.spd:
            return 0 if self.chol is None else self.chol.nbytes
        return 0 if self.lu is None else self.lu.nbytes

    def solve(self, b: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """X^{-1} b, or X^{-*} b"""
        if self.n == 0 or np.size(b) == 0:
            return np.array(b, copy=True)
        if self.spd:
            return sla.cho_solve((self.chol, True), b)
        return sla.lu_solve((self.lu, self.piv), b, trans=2 if adjoint else 0)

    def matvec(self, x: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """X x, or X* x, from the stored factors"""
        if self.n == 0:
            return np.array(x, copy=True)
        if self.spd:
            return self.chol @ (self.chol.conj().T @ x)
        lower = np.tril(self.lu, -1) + np.eye(self.n, dtype=self.lu.dtype)
        upper = np.triu(self.lu)
        if adjoint:
            return upper.conj().T @ (lower.conj().T @ x[self.perm])
        y = lower @ (upper @ x)
        out = np.empty_like(y)
        out[self.perm] = y
        return out

    def sqrt_matvec(self, x: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """C x, or C* x"""
        self._require_spd()
        if self.n == 0:
            return np.array(x, copy=True)
        return (self.chol.conj().T if adjoint else self.chol) @ x

    def sqrt_solve(self, b: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """C^{-1} b, or C^{-*} b"""
        self._require_spd()
        if self.n == 0 or np.size(b) == 0:
            return np.array(b, copy=True)
        if adjoint:
            return sla.solve_triangular(self.chol, b, lower=True, trans=2)
        return sla.solve_triangular(self.chol, b, lower=True)

    def logdet(self) -> float:
        self._require_spd()
        if self.n == 0:
            return 0.0
        return float(2.0 * np.sum(np.log(np.abs(np.diag(self.chol)))))

    def _require_spd(self):
        if not self.spd:
            raise ValueError("Operation needs a symmetric positive definite factor")


def pivot_factor(X: np.ndarray, spd: bool = False) -> PivotFactor:
    return PivotFactor(X, spd=spd)


def block_eliminate(A_II: PivotFactor, A_JI: np.ndarray, A_IJ: np.ndarray, A_JJ: Optional[np.ndarray] = None):
    """
    Eliminate the I block against J.

    Returns the off-diagonal blocks -A_JI A_II^{-1} of L and -A_II^{-1} A_IJ of U,
    and the Schur complement A_JJ - A_JI A_II^{-1} A_IJ (only the update when
    A_JJ is None).
    """
    if A_JI.shape[1] != A_II.n or A_IJ.shape[0] != A_II.n:
        raise ValueError(f"Block shapes {A_JI.shape}, {A_IJ.shape} do not match pivot of size {A_II.n}")
    U_block = -A_II.solve(A_IJ)
    L_block = -A_II.solve(A_JI.conj().T, adjoint=True).conj().T
    update = A_JI @ U_block
    S_JJ = update if A_JJ is None else A_JJ + update
    return L_block, U_block, S_JJ
