#!/usr/bin/env python3
"""
Recursive skeletonization drivers and the resulting factorization

    K ~= F = V_1 ... V_n D W_n ... W_1

where every V_i, W_i is a stored skeletonization step and D is block diagonal
over the redundant sets of the steps plus the DOFs left at the top.
"""
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from denselinalg import PivotError, PivotFactor, pivot_factor
from geometry import ActiveState, Tree
from matrixsource import AdjacencyError, MatrixSource
from skeletonization import SkelFactor, strong_skeletonize, weak_skeletonize

METHODS = ("rs-s", "rs-ws")
STRICT_CHECKS = os.environ.get("RSKEL_STRICT", "0") == "1"

# Serialization
MAGIC = "RSKEL"
FORMAT_VERSION = 1


def default_proxy_count(dim: int) -> int:
    return 64 if dim == 2 else 512


@dataclass
class BlockDiagonal:
    """Factored diagonal blocks on disjoint index sets"""
    blocks: list[tuple[np.ndarray, PivotFactor]] = field(default_factory=list)

    def append(self, idx: np.ndarray, factor: PivotFactor):
        self.blocks.append((idx, factor))

    @property
    def nbytes(self) -> int:
        return sum(f.nbytes for _, f in self.blocks)

    def covers(self, n: int) -> bool:
        if not self.blocks:
            return n == 0
        idx = np.concatenate([i for i, _ in self.blocks])
        return idx.size == n and np.array_equal(np.sort(idx), np.arange(n))

    def _map(self, x: np.ndarray, fn) -> np.ndarray:
        out = x.copy()
        for idx, factor in self.blocks:
            out[idx] = fn(factor, x[idx])
        return out

    def matvec(self, x, adjoint=False):
        return self._map(x, lambda f, v: f.matvec(v, adjoint=adjoint))

    def solve(self, x, adjoint=False):
        return self._map(x, lambda f, v: f.solve(v, adjoint=adjoint))

    def sqrt_matvec(self, x, adjoint=False):
        return self._map(x, lambda f, v: f.sqrt_matvec(v, adjoint=adjoint))

    def sqrt_solve(self, x, adjoint=False):
        return self._map(x, lambda f, v: f.sqrt_solve(v, adjoint=adjoint))

    def logdet(self) -> float:
        return float(sum(f.logdet() for _, f in self.blocks))


@dataclass
class Factorization:
    n: int
    dim: int
    method: str
    spd: bool
    eps: float
    factors: list[SkelFactor]
    diagonal: BlockDiagonal
    top: np.ndarray  # DOFs left active after the last step
    skeleton_sizes: list[int]  # max |S| per strongly skeletonized level
    build_seconds: float = 0.0

    @property
    def nbytes(self) -> int:
        """Stored dense blocks at native width"""
        return sum(f.nbytes for f in self.factors) + self.diagonal.nbytes

    def _vector(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim not in (1, 2) or x.shape[0] != self.n:
            raise ValueError(f"Expected {self.n} rows, got shape {x.shape}")
        dtype = np.result_type(x.dtype, np.float64)
        return np.array(x, dtype=dtype, copy=True)

    def apply(self, x, adjoint: bool = False) -> np.ndarray:
        """F x, or F* x"""
        y = self._vector(x)
        if adjoint:
            for f in self.factors:
                f.apply_v(y, adjoint=True)
            y = self.diagonal.matvec(y, adjoint=True)
            for f in reversed(self.factors):
                f.apply_w(y, adjoint=True)
            return y
        for f in self.factors:
            f.apply_w(y)
        y = self.diagonal.matvec(y)
        for f in reversed(self.factors):
            f.apply_v(y)
        return y

    def solve(self, b, adjoint: bool = False) -> np.ndarray:
        """F^{-1} b, or F^{-*} b"""
        y = self._vector(b)
        if adjoint:
            for f in self.factors:
                f.apply_w(y, inverse=True, adjoint=True)
            y = self.diagonal.solve(y, adjoint=True)
            for f in reversed(self.factors):
                f.apply_v(y, inverse=True, adjoint=True)
            return y
        for f in self.factors:
            f.apply_v(y, inverse=True)
        y = self.diagonal.solve(y)
        for f in reversed(self.factors):
            f.apply_w(y, inverse=True)
        return y

    def apply_sqrt(self, x, adjoint: bool = False) -> np.ndarray:
        """F^{1/2} x with F = F^{1/2} (F^{1/2})*, or (F^{1/2})* x"""
        self._require_spd()
        y = self._vector(x)
        if adjoint:
            for f in self.factors:
                f.apply_w(y)
            return self.diagonal.sqrt_matvec(y, adjoint=True)
        y = self.diagonal.sqrt_matvec(y)
        for f in reversed(self.factors):
            f.apply_v(y)
        return y

    def solve_sqrt(self, b, adjoint: bool = False) -> np.ndarray:
        """(F^{1/2})^{-1} b, or (F^{1/2})^{-*} b"""
        self._require_spd()
        y = self._vector(b)
        if adjoint:
            y = self.diagonal.sqrt_solve(y, adjoint=True)
            for f in reversed(self.factors):
                f.apply_w(y, inverse=True)
            return y
        for f in self.factors:
            f.apply_v(y, inverse=True)
        return self.diagonal.sqrt_solve(y)

    def logdet(self) -> float:
        """log det F from the diagonal blocks; unit-triangular steps contribute nothing"""
        self._require_spd()
        return self.diagonal.logdet()

    def _require_spd(self):
        if not self.spd:
            raise ValueError("Factorization was not built with spd=True")

    def factor_counts(self) -> dict:
        counts = {}
        for f in self.factors:
            key = (f.level, f.kind)
            counts[key] = counts.get(key, 0) + 1
        return counts


def _check_far_field(work: MatrixSource, tree: Tree, box_ids: list[int]):
    for box_id in box_ids:
        bad = work.far_field_violations(tree, box_id)
        if bad:
            raise AdjacencyError(f"Cached updates reach the far field of box {box_id}: {bad[:3]}")


def _factor(src: MatrixSource, tree: Tree, eps: float, n_p: Optional[int], spd: bool, method: str,
            use_proxy: Optional[bool], check: bool) -> Factorization:
    if method not in METHODS:
        raise ValueError(f"Unknown method: {method}. Valid: {', '.join(METHODS)}")
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if spd and not src.symmetric:
        raise ValueError("spd=True needs a symmetric source")
    if len(tree.points) != src.n:
        raise ValueError(f"Tree has {len(tree.points)} points, source has {src.n}")
    n_p = default_proxy_count(src.dim) if n_p is None else n_p
    check = STRICT_CHECKS if check is None else check

    start = time.perf_counter()
    state = ActiveState.initial(src.n)
    work = src.bind(tree, state.active)
    factors: list[SkelFactor] = []
    sizes: list[int] = []
    L = tree.root_level

    for level in range(1, L - 1):
        boxes = tree.level_boxes(level)
        if method == "rs-ws":
            for box_id in boxes:
                factors.append(weak_skeletonize(work, tree, state, box_id, eps, n_p, spd=spd, use_proxy=use_proxy))
        level_sizes = []
        for box_id in boxes:
            if check:
                _check_far_field(work, tree, [box_id])
            f = strong_skeletonize(work, tree, state, box_id, eps, n_p, spd=spd, use_proxy=use_proxy)
            factors.append(f)
            level_sizes.append(f.skeleton.size)
        sizes.append(max(level_sizes, default=0))
        work.promote_level(tree, state)
        logging.info(f"{method} level {level}: {len(boxes)} boxes, k={sizes[-1]}, active={state.n_active}")

    if method == "rs-ws" and L >= 2:
        for box_id in tree.level_boxes(L - 1):
            factors.append(weak_skeletonize(work, tree, state, box_id, eps, n_p, spd=spd, use_proxy=use_proxy))

    if any(b < a for a, b in zip(sizes, sizes[1:])):
        logging.warning(f"Skeleton sizes not monotone across levels: {sizes}")

    diagonal = BlockDiagonal()
    for f in factors:
        if not f.is_noop:
            diagonal.append(f.redundant, f.pivot)
    top = np.flatnonzero(state.active)
    if top.size:
        try:
            diagonal.append(top, pivot_factor(work.entries(top, top), spd=spd))
        except PivotError as e:
            raise PivotError(f"Top block factorization failed: {e}", level=L) from e

    F = Factorization(
        n=src.n,
        dim=src.dim,
        method=method,
        spd=spd,
        eps=eps,
        factors=factors,
        diagonal=diagonal,
        top=top,
        skeleton_sizes=sizes,
        build_seconds=time.perf_counter() - start,
    )
    logging.info(f"{method}: {len(factors)} steps, top block {top.size}, {F.nbytes / 1e6:.2f} MB, "
                 f"{F.build_seconds:.2f}s")
    return F


def factor_rss(src: MatrixSource, tree: Tree, eps: float, n_p: Optional[int] = None, spd: bool = False,
               use_proxy: Optional[bool] = None, check: Optional[bool] = None) -> Factorization:
    """Strong recursive skeletonization: strong steps on levels 1..L-2"""
    return _factor(src, tree, eps, n_p, spd, "rs-s", use_proxy, check)


def factor_rsws(src: MatrixSource, tree: Tree, eps: float, n_p: Optional[int] = None, spd: bool = False,
                use_proxy: Optional[bool] = None, check: Optional[bool] = None) -> Factorization:
    """Hybrid variant: weak then strong steps per level, and a final weak pass on level L-1"""
    return _factor(src, tree, eps, n_p, spd, "rs-ws", use_proxy, check)


def save_factorization(F: Factorization, path) -> None:
    """Write F to a NumPy .npz container (layout in README.md)"""
    header = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "N": F.n,
        "dim": F.dim,
        "method": F.method,
        "spd": F.spd,
        "eps": F.eps,
        "steps": len(F.factors),
        "blocks": len(F.diagonal.blocks),
        "skeleton_sizes": F.skeleton_sizes,
    }
    arrays = {"top": F.top}
    meta = []
    for i, f in enumerate(F.factors):
        meta.append({"box_id": f.box_id, "level": f.level, "kind": f.kind})
        for name in ("redundant", "skeleton", "near", "interp", "lower", "upper"):
            arrays[f"step{i}_{name}"] = getattr(f, name)
    for i, (idx, pf) in enumerate(F.diagonal.blocks):
        arrays[f"block{i}_idx"] = idx
        if pf.spd:
            arrays[f"block{i}_chol"] = pf.chol
        else:
            arrays[f"block{i}_lu"] = pf.lu
            arrays[f"block{i}_piv"] = pf.piv
    header["step_meta"] = meta
    np.savez_compressed(path, header=np.array(json.dumps(header)), **arrays)


def load_factorization(path) -> Factorization:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("magic") != MAGIC:
            raise ValueError(f"{path} is not a factorization file")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"Unsupported factorization format version {header.get('version')}")
        diagonal = BlockDiagonal()
        pivots_by_first = {}
        for i in range(header["blocks"]):
            idx = data[f"block{i}_idx"]
            if header["spd"]:
                pf = PivotFactor.from_arrays(True, chol=data[f"block{i}_chol"])
            else:
                pf = PivotFactor.from_arrays(False, lu=data[f"block{i}_lu"], piv=data[f"block{i}_piv"])
            diagonal.append(idx, pf)
            if idx.size:
                pivots_by_first[int(idx[0])] = pf
        factors = []
        for i, meta in enumerate(header["step_meta"]):
            parts = {name: data[f"step{i}_{name}"] for name in ("redundant", "skeleton", "near", "interp",
                                                                 "lower", "upper")}
            pivot = pivots_by_first.get(int(parts["redundant"][0])) if parts["redundant"].size else None
            factors.append(SkelFactor(pivot=pivot, **meta, **parts))
        top = data["top"]
    return Factorization(
        n=header["N"],
        dim=header["dim"],
        method=header["method"],
        spd=header["spd"],
        eps=header["eps"],
        factors=factors,
        diagonal=diagonal,
        top=top,
        skeleton_sizes=header["skeleton_sizes"],
    )
