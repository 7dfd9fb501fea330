#!/usr/bin/env python3
"""
One skeletonization step for a single box.

A step compresses the interactions of the box's active DOFs B with the rest
of the matrix by an interpolative decomposition, splits B into skeleton S and
redundant R, and eliminates R so that it decouples from everything else. The
step is stored as two products of unit block-triangular matrices,

    V = (I + e1)(I + e2),  e1 = T* on (R, S),  e2 = E_L on (J, R)
    W = (I + e3)(I + e4),  e3 = E_U on (R, J),  e4 = T on (S, R)

with J = S + near field for strong steps and J = S for weak ones, so that
the current matrix A is V X W with X block diagonal in R.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from denselinalg import IDResult, PivotError, PivotFactor, block_eliminate, interp_decomp, pivot_factor
from geometry import ActiveState, Tree, active_dof_sets, far_field_dofs, proxy_points
from matrixsource import MatrixSource

STEP_KINDS = ("strong", "weak")


@dataclass
class SkelFactor:
    box_id: int
    level: int
    kind: str
    redundant: np.ndarray
    skeleton: np.ndarray
    near: np.ndarray
    interp: np.ndarray  # T, |S| x |R|
    lower: np.ndarray  # E_L, |J| x |R|
    upper: np.ndarray  # E_U, |R| x |J|
    pivot: Optional[PivotFactor]

    @property
    def coupled(self) -> np.ndarray:
        return np.concatenate([self.skeleton, self.near])

    @property
    def is_noop(self) -> bool:
        return self.redundant.size == 0

    @property
    def nbytes(self) -> int:
        total = self.interp.nbytes + self.lower.nbytes + self.upper.nbytes
        return total + (self.pivot.nbytes if self.pivot is not None else 0)

    @classmethod
    def noop(cls, box_id: int, level: int, kind: str, skeleton: np.ndarray) -> "SkelFactor":
        empty = np.zeros(0, dtype=np.int64)
        return cls(
            box_id=box_id,
            level=level,
            kind=kind,
            redundant=empty,
            skeleton=skeleton,
            near=empty,
            interp=np.zeros((skeleton.size, 0)),
            lower=np.zeros((skeleton.size, 0)),
            upper=np.zeros((0, skeleton.size)),
            pivot=None,
        )

    def apply_v(self, x: np.ndarray, inverse: bool = False, adjoint: bool = False) -> np.ndarray:
        """V x, V^{-1} x, V* x or V^{-*} x, in place on x"""
        if self.is_noop:
            return x
        R, S, J = self.redundant, self.skeleton, self.coupled
        Tstar = self.interp.conj().T
        e1 = (R, S, Tstar)
        e2 = (J, R, self.lower)
        return _product(x, e1, e2, inverse, adjoint)

    def apply_w(self, x: np.ndarray, inverse: bool = False, adjoint: bool = False) -> np.ndarray:
        """W x, W^{-1} x, W* x or W^{-*} x, in place on x"""
        if self.is_noop:
            return x
        R, S, J = self.redundant, self.skeleton, self.coupled
        e3 = (R, J, self.upper)
        e4 = (S, R, self.interp)
        return _product(x, e3, e4, inverse, adjoint)


def _elementary(x, op, sign, adjoint):
    rows, cols, E = op
    if E.size == 0:
        return
    if adjoint:
        x[cols] += sign * (E.conj().T @ x[rows])
    else:
        x[rows] += sign * (E @ x[cols])


def _product(x, first, second, inverse, adjoint):
    """Apply (I + first)(I + second) or its inverse/adjoint variants"""
    if not inverse and not adjoint:
        _elementary(x, second, 1.0, False)
        _elementary(x, first, 1.0, False)
    elif inverse and not adjoint:
        _elementary(x, first, -1.0, False)
        _elementary(x, second, -1.0, False)
    elif adjoint and not inverse:
        _elementary(x, first, 1.0, True)
        _elementary(x, second, 1.0, True)
    else:
        _elementary(x, second, -1.0, True)
        _elementary(x, first, -1.0, True)
    return x


def _compress_rows(src: MatrixSource, tree: Tree, state: ActiveState, box_id: int, B, complement,
                   n_p: int, use_proxy: bool) -> np.ndarray:
    """Stack everything the columns B must reproduce: explicit rows, then proxy rows"""
    blocks = []
    if use_proxy:
        if complement.size:
            blocks.append(src.entries(complement, B))
            if not src.symmetric:
                blocks.append(src.entries(B, complement).conj().T)
        if tree.has_distant_cells(box_id):
            proxies = proxy_points(tree.box(box_id), n_p)
            blocks.append(src.proxy_rows(B, proxies))
            if not src.symmetric:
                blocks.append(src.proxy_rows(B, proxies, adjoint=True))
    else:
        far = far_field_dofs(tree, state, box_id)
        rows = np.setdiff1d(far, complement) if complement.size else far
        rows = np.concatenate([complement, rows])
        if rows.size:
            blocks.append(src.entries(rows, B))
            if not src.symmetric:
                blocks.append(src.entries(B, rows).conj().T)
    if not blocks:
        return np.zeros((0, B.size))
    return np.vstack(blocks)


def _eliminate(src: MatrixSource, state: ActiveState, box_id: int, level: int, kind: str,
               B: np.ndarray, id_result: IDResult, N: np.ndarray, spd: bool) -> SkelFactor:
    S = B[id_result.skeleton]
    R = B[id_result.redundant]
    T = id_result.interp
    if R.size == 0:
        state.deactivate(box_id, R, S)
        return SkelFactor.noop(box_id, level, kind, S)

    r = R.size
    RS = np.concatenate([R, S])
    A_BB = src.entries(RS, RS)
    A_RR, A_RS = A_BB[:r, :r], A_BB[:r, r:]
    A_SR, A_SS = A_BB[r:, :r], A_BB[r:, r:]
    Tstar = T.conj().T

    X_RR = A_RR - Tstar @ A_SR - A_RS @ T + Tstar @ A_SS @ T
    X_SR = A_SR - A_SS @ T
    X_RS = A_RS - Tstar @ A_SS
    if N.size:
        A_BN = src.entries(RS, N)
        A_NB = src.entries(N, RS)
        X_NR = A_NB[:, :r] - A_NB[:, r:] @ T
        X_RN = A_BN[:r] - Tstar @ A_BN[r:]
        X_JR = np.vstack([X_SR, X_NR])
        X_RJ = np.hstack([X_RS, X_RN])
    else:
        X_JR, X_RJ = X_SR, X_RS

    if spd:
        X_RR = 0.5 * (X_RR + X_RR.conj().T)
        X_RJ = X_JR.conj().T
    try:
        pivot = pivot_factor(X_RR, spd=spd)
    except PivotError as e:
        raise PivotError(f"Pivot elimination failed: {e}", box_id=box_id, level=level) from e

    L_block, U_block, update = block_eliminate(pivot, X_JR, X_RJ)
    if spd:
        update = 0.5 * (update + update.conj().T)
    J = np.concatenate([S, N])
    src.add_update(J, J, update)
    state.deactivate(box_id, R, S)
    return SkelFactor(
        box_id=box_id,
        level=level,
        kind=kind,
        redundant=R,
        skeleton=S,
        near=N,
        interp=T,
        lower=-L_block,
        upper=-U_block,
        pivot=pivot,
    )


def strong_skeletonize(src: MatrixSource, tree: Tree, state: ActiveState, box_id: int, eps: float, n_p: int,
                       spd: bool = False, use_proxy: Optional[bool] = None) -> SkelFactor:
    """
    Compress the far field of a box and decouple its redundant DOFs.

    The ID sees A(O, B) (and A(B, O)* for unsymmetric sources) plus proxy rows
    standing in for the distant far field. Redundant DOFs are eliminated
    against skeleton and near field; the Schur complement goes to the cache.
    """
    box = tree.box(box_id)
    B, N, O = active_dof_sets(tree, state, box_id)
    if use_proxy is None:
        use_proxy = src.kernel.supports_proxy
    if B.size == 0:
        return SkelFactor.noop(box_id, box.level, "strong", B)
    M = _compress_rows(src, tree, state, box_id, B, O, n_p, use_proxy)
    if M.shape[0] == 0:
        # nothing outside the near field
        state.deactivate(box_id, np.zeros(0, dtype=np.int64), B)
        return SkelFactor.noop(box_id, box.level, "strong", B)
    id_result = interp_decomp(M, eps)
    factor = _eliminate(src, state, box_id, box.level, "strong", B, id_result, N, spd)
    logging.debug(f"Strong step box {box_id}: |B|={B.size} |S|={factor.skeleton.size} |N|={N.size}")
    return factor


def weak_skeletonize(src: MatrixSource, tree: Tree, state: ActiveState, box_id: int, eps: float, n_p: int,
                     spd: bool = False, use_proxy: Optional[bool] = None) -> SkelFactor:
    """
    Compress all interactions of a box, near field included, and decouple
    its redundant DOFs against the skeleton only.
    """
    box = tree.box(box_id)
    B, N, O = active_dof_sets(tree, state, box_id)
    if use_proxy is None:
        use_proxy = src.kernel.supports_proxy
    if B.size == 0:
        return SkelFactor.noop(box_id, box.level, "weak", B)
    complement = np.concatenate([N, O])
    M = _compress_rows(src, tree, state, box_id, B, complement, n_p, use_proxy)
    id_result = interp_decomp(M, eps)
    factor = _eliminate(src, state, box_id, box.level, "weak", B, id_result, np.zeros(0, dtype=np.int64), spd)
    logging.debug(f"Weak step box {box_id}: |B|={B.size} |S|={factor.skeleton.size}")
    return factor
