#!/usr/bin/env python3
"""
Oracles and estimators: dense assembly, power-method norm estimates of
K - F and I - K F^{-1}, and preconditioned conjugate gradients.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from factorization import Factorization
from matrixsource import MatrixSource

# Configuration
DENSE_LIMIT = int(os.environ.get("RSKEL_DENSE_LIMIT", "16384"))
DENSE_MATVEC_LIMIT = int(os.environ.get("RSKEL_DENSE_MATVEC_LIMIT", "4096"))
NORM_TOL = 1e-2
NORM_MAXIT = 100
CHUNK_ROWS = 1024


class CGBreakdown(ValueError):
    """Non-positive curvature: operator or preconditioner is not SPD"""


def dense_assemble(src: MatrixSource, idx=None, limit: int = DENSE_LIMIT) -> np.ndarray:
    """Full matrix of entries() over idx (all DOFs by default)"""
    idx = np.arange(src.n) if idx is None else np.asarray(idx, dtype=np.int64)
    if idx.size > limit:
        raise ValueError(f"Dense assembly of {idx.size} DOFs exceeds the limit of {limit}")
    return src.entries(idx, idx)


def source_linop(src: MatrixSource, dense: Optional[bool] = None) -> LinearOperator:
    """K as a linear operator; dense copy for small N, chunked rows otherwise"""
    dense = src.n <= DENSE_MATVEC_LIMIT if dense is None else dense
    if dense:
        return aslinearoperator(dense_assemble(src))
    all_ids = np.arange(src.n)
    chunks = [all_ids[i:i + CHUNK_ROWS] for i in range(0, src.n, CHUNK_ROWS)]

    def matvec(x):
        x = np.asarray(x).reshape(-1)
        return np.concatenate([src.entries(rows, all_ids) @ x for rows in chunks])

    def rmatvec(y):
        y = np.asarray(y).reshape(-1)
        out = np.zeros(src.n, dtype=np.result_type(y, float))
        for rows in chunks:
            out += src.entries(rows, all_ids).conj().T @ y[rows]
        return out

    return LinearOperator((src.n, src.n), matvec=matvec, rmatvec=rmatvec, dtype=float)


def factor_linop(F: Factorization, inverse: bool = False) -> LinearOperator:
    """F (or F^{-1}) with its adjoint"""
    if inverse:
        return LinearOperator((F.n, F.n), matvec=F.solve, rmatvec=lambda y: F.solve(y, adjoint=True), dtype=float)
    return LinearOperator((F.n, F.n), matvec=F.apply, rmatvec=lambda y: F.apply(y, adjoint=True), dtype=float)


@dataclass
class NormEstimate:
    value: float
    iterations: int
    converged: bool

    def __float__(self) -> float:
        return self.value


def est_opnorm_diff(A, B=None, tol: float = NORM_TOL, maxit: int = NORM_MAXIT, seed: int = 0) -> NormEstimate:
    """
    Power method for ||A - B||_2 (||A|| when B is None).

    Iterates on (A - B)*(A - B) from a seeded Gaussian start until successive
    estimates agree to tol in relative terms.
    """
    A = aslinearoperator(A)
    B = None if B is None else aslinearoperator(B)
    if B is not None and A.shape != B.shape:
        raise ValueError(f"Operator shapes differ: {A.shape} vs {B.shape}")
    n = A.shape[1]

    def fwd(x):
        return A.matvec(x) if B is None else A.matvec(x) - B.matvec(x)

    def adj(y):
        return A.rmatvec(y) if B is None else A.rmatvec(y) - B.rmatvec(y)

    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    estimate = 0.0
    for it in range(1, maxit + 1):
        y = fwd(x)
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return NormEstimate(0.0, it, True)
        z = adj(y)
        z_norm = np.linalg.norm(z)
        if z_norm == 0.0:
            return NormEstimate(new, it, True)
        x = z / z_norm
        if it > 1 and abs(new - estimate) <= tol * new:
            return NormEstimate(new, it, True)
        estimate = new
    logging.warning(f"Power method did not converge in {maxit} iterations (estimate {estimate:.3e})")
    return NormEstimate(estimate, maxit, False)


def forward_error(K, F: Factorization, tol: float = NORM_TOL, seed: int = 0) -> float:
    """e_a = ||K - F|| / ||K||"""
    K = aslinearoperator(K)
    diff = est_opnorm_diff(K, factor_linop(F), tol=tol, seed=seed)
    scale = est_opnorm_diff(K, tol=tol, seed=seed)
    return diff.value / scale.value if scale.value else float("inf")


def inverse_error(K, F: Factorization, tol: float = NORM_TOL, seed: int = 0) -> float:
    """e_s = ||I - K F^{-1}||"""
    K = aslinearoperator(K)
    n = K.shape[0]
    identity = LinearOperator((n, n), matvec=lambda x: x, rmatvec=lambda y: y, dtype=float)
    return est_opnorm_diff(identity, K.dot(factor_linop(F, inverse=True)), tol=tol, seed=seed).value


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residuals: list[float] = field(default_factory=list)


def pcg_solve(A, b, M_inv=None, rtol: float = 1e-12, maxit: Optional[int] = None) -> CGResult:
    """Preconditioned conjugate gradients from x0 = 0 (no restarts)"""
    A = aslinearoperator(A)
    M = None if M_inv is None else aslinearoperator(M_inv)
    b = np.asarray(b, dtype=float).reshape(-1)
    maxit = b.size if maxit is None else maxit
    x = np.zeros_like(b)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return CGResult(x, 0, True, [0.0])

    r = b.copy()
    z = r if M is None else M.matvec(r)
    p = z.copy()
    rz = float(r @ z)
    history = [1.0]
    for it in range(1, maxit + 1):
        Ap = A.matvec(p)
        curvature = float(p @ Ap)
        if curvature <= 0.0 or rz <= 0.0:
            raise CGBreakdown(f"Non-positive curvature at iteration {it}: operator is not SPD")
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * Ap
        history.append(float(np.linalg.norm(r) / b_norm))
        if history[-1] <= rtol:
            return CGResult(x, it, True, history)
        z = r if M is None else M.matvec(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    logging.info(f"CG stopped at maxit={maxit}, relative residual {history[-1]:.3e}")
    return CGResult(x, maxit, False, history)
