#!/usr/bin/env python3
"""
On-demand matrix entries: kernel interactions times quadrature weights, a
diagonal rule, optional near-field quadrature corrections, and the Schur
complement updates accumulated while factorizing.
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sps

from geometry import PointSet, Tree, as_points

KERNEL_KINDS = ("laplace2d-log", "laplace3d", "laplace3d-dlp", "gaussian-test")

# Cell distance limits for cached update pairs
CREATION_REACH = 2
PROMOTED_REACH = 1


class AdjacencyError(RuntimeError):
    """A cached update connects cells that must not interact"""


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    dim: int
    sigma: float = 1.0  # gaussian-test only

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"Unknown kernel kind: {self.kind}. Valid: {', '.join(KERNEL_KINDS)}")
        expected = 2 if self.kind == "laplace2d-log" else 3 if self.kind.startswith("laplace3d") else self.dim
        if self.dim != expected or self.dim not in (2, 3):
            raise ValueError(f"Kernel {self.kind} does not support dim={self.dim}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def symmetric(self) -> bool:
        return self.kind != "laplace3d-dlp"

    @property
    def supports_proxy(self) -> bool:
        """Green's identity holds, so a proxy surface can stand in for the far field"""
        return self.kind != "gaussian-test"

    def evaluate(self, targets: np.ndarray, sources: np.ndarray, normals: Optional[np.ndarray] = None) -> np.ndarray:
        """Kernel matrix K(x_i - y_j) for distinct targets x_i and sources y_j"""
        diff = targets[:, None, :] - sources[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", diff, diff)
        coincident = r2 == 0
        r2 = np.where(coincident, 1.0, r2)
        if self.kind == "laplace2d-log":
            out = -np.log(r2) / (4.0 * np.pi)
        elif self.kind == "laplace3d":
            out = 1.0 / (4.0 * np.pi * np.sqrt(r2))
        elif self.kind == "laplace3d-dlp":
            if normals is None:
                raise ValueError("Double-layer kernel needs source normals")
            dot = np.einsum("ijk,jk->ij", diff, normals)
            out = dot / (4.0 * np.pi * r2 * np.sqrt(r2))
        else:
            out = np.exp(-r2 / (2.0 * self.sigma ** 2))
        out[coincident] = 0.0
        return out

    def evaluate_adjoint_proxy(self, targets: np.ndarray, proxies: np.ndarray) -> np.ndarray:
        """
        Functions of the targets that span the row space of far-field
        interactions in the transposed orientation.
        """
        if self.kind == "laplace3d-dlp":
            return KernelSpec("laplace3d", 3).evaluate(targets, proxies)
        return self.evaluate(targets, proxies)


class UpdateCache:
    """
    Additive corrections keyed by pairs of grid cells of the current depth.

    Each block stores sorted row and column DOF ids and a dense value array.
    """

    def __init__(self, tree: Tree):
        self.tree = tree
        self.depth = tree.max_depth
        self.blocks: dict = {}

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def nbytes(self) -> int:
        return sum(vals.nbytes for _, _, vals in self.blocks.values())

    def cells(self, dofs: np.ndarray) -> np.ndarray:
        return self.tree.cells_at(dofs, self.depth)

    def _merge(self, key, rows, cols, values):
        old = self.blocks.get(key)
        if old is None:
            order_r, order_c = np.argsort(rows), np.argsort(cols)
            self.blocks[key] = (rows[order_r], cols[order_c], values[np.ix_(order_r, order_c)].copy())
            return
        o_rows, o_cols, o_vals = old
        all_rows = np.union1d(o_rows, rows)
        all_cols = np.union1d(o_cols, cols)
        dtype = np.result_type(o_vals, values)
        merged = np.zeros((len(all_rows), len(all_cols)), dtype=dtype)
        merged[np.ix_(np.searchsorted(all_rows, o_rows), np.searchsorted(all_cols, o_cols))] += o_vals
        merged[np.ix_(np.searchsorted(all_rows, rows), np.searchsorted(all_cols, cols))] += values
        self.blocks[key] = (all_rows, all_cols, merged)

    def add(self, I: np.ndarray, J: np.ndarray, correction: np.ndarray):
        cells_i = self.cells(I)
        cells_j = self.cells(J)
        keys_i, inv_i = np.unique(cells_i, axis=0, return_inverse=True)
        keys_j, inv_j = np.unique(cells_j, axis=0, return_inverse=True)
        inv_i = np.asarray(inv_i).reshape(-1)
        inv_j = np.asarray(inv_j).reshape(-1)
        for a, key_a in enumerate(keys_i):
            pos_i = np.flatnonzero(inv_i == a)
            for b, key_b in enumerate(keys_j):
                if np.abs(key_a - key_b).max() > CREATION_REACH:
                    raise AdjacencyError(
                        f"Update between cells {tuple(key_a)} and {tuple(key_b)} at depth {self.depth} "
                        f"is outside a common near field"
                    )
                pos_j = np.flatnonzero(inv_j == b)
                key = (tuple(int(v) for v in key_a), tuple(int(v) for v in key_b))
                self._merge(key, I[pos_i], J[pos_j], correction[np.ix_(pos_i, pos_j)])

    def gather(self, I: np.ndarray, J: np.ndarray, out: np.ndarray):
        """Add every cached correction overlapping (I, J) into out"""
        if not self.blocks or I.size == 0 or J.size == 0:
            return
        cells_i = self.cells(I)
        cells_j = self.cells(J)
        keys_i, inv_i = np.unique(cells_i, axis=0, return_inverse=True)
        keys_j, inv_j = np.unique(cells_j, axis=0, return_inverse=True)
        inv_i = np.asarray(inv_i).reshape(-1)
        inv_j = np.asarray(inv_j).reshape(-1)
        for a, key_a in enumerate(keys_i):
            ta = tuple(int(v) for v in key_a)
            pos_i = None
            for b, key_b in enumerate(keys_j):
                block = self.blocks.get((ta, tuple(int(v) for v in key_b)))
                if block is None:
                    continue
                if pos_i is None:
                    pos_i = np.flatnonzero(inv_i == a)
                rows, cols, vals = block
                pos_j = np.flatnonzero(inv_j == b)
                hit_i, loc_i = _locate(I[pos_i], rows)
                hit_j, loc_j = _locate(J[pos_j], cols)
                if hit_i.any() and hit_j.any():
                    out[np.ix_(pos_i[hit_i], pos_j[hit_j])] += vals[np.ix_(loc_i[hit_i], loc_j[hit_j])]

    def promote(self, active: np.ndarray):
        """Drop inactive DOFs and re-key every block to the parent depth"""
        old = self.blocks
        self.blocks = {}
        self.depth -= 1
        for (key_a, key_b), (rows, cols, vals) in old.items():
            keep_r = active[rows]
            keep_c = active[cols]
            if not keep_r.any() or not keep_c.any():
                continue
            parent_a = np.array(key_a) >> 1
            parent_b = np.array(key_b) >> 1
            if np.abs(parent_a - parent_b).max() > PROMOTED_REACH:
                raise AdjacencyError(
                    f"Cached pair {key_a}-{key_b} is not adjacent after promotion to depth {self.depth}"
                )
            key = (tuple(int(v) for v in parent_a), tuple(int(v) for v in parent_b))
            self._merge(key, rows[keep_r], cols[keep_c], vals[np.ix_(keep_r, keep_c)])

    def pairs(self) -> list:
        return list(self.blocks)


def _locate(query: np.ndarray, sorted_ids: np.ndarray):
    pos = np.searchsorted(sorted_ids, query)
    pos = np.minimum(pos, len(sorted_ids) - 1)
    return sorted_ids[pos] == query, pos


@dataclass
class MatrixSource:
    """
    Entry generator for K_ij = w_j K(x_i - x_j) with K_ii = diagonal[i],
    plus sparse near-field corrections and, once bound to a factorization,
    the cached Schur complement updates.
    """
    kernel: KernelSpec
    points: PointSet
    weights: np.ndarray
    diagonal: np.ndarray
    normals: Optional[np.ndarray] = None
    near: Optional[sps.csr_matrix] = None
    cache: Optional[UpdateCache] = field(default=None, repr=False)
    active: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.points = as_points(self.points)
        n = len(self.points)
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (n,)).copy()
        self.diagonal = np.broadcast_to(np.asarray(self.diagonal), (n,)).copy()
        if self.kernel.dim != self.points.dim:
            raise ValueError(f"Kernel dim {self.kernel.dim} != point dim {self.points.dim}")
        if self.normals is not None and self.normals.shape != self.points.coords.shape:
            raise ValueError("Normals must match the point array shape")
        if self.near is not None:
            self.near = sps.csr_matrix(self.near)
            if self.near.shape != (n, n):
                raise ValueError(f"Near-field correction must be {n}x{n}")

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.dim

    @property
    def symmetric(self) -> bool:
        if not self.kernel.symmetric or self.near is not None:
            return False
        return bool(np.all(self.weights == self.weights[0]))

    def bind(self, tree: Tree, active: np.ndarray) -> "MatrixSource":
        """Working copy with an empty update cache tied to a factorization's active mask"""
        if len(tree.points) != self.n:
            raise ValueError(f"Tree has {len(tree.points)} points, source has {self.n}")
        work = copy.copy(self)
        work.cache = UpdateCache(tree)
        work.active = active
        return work

    def entries(self, I, J) -> np.ndarray:
        """Dense block A(I, J) of the current matrix"""
        I = np.asarray(I, dtype=np.int64).reshape(-1)
        J = np.asarray(J, dtype=np.int64).reshape(-1)
        if self.active is not None:
            if not (self.active[I].all() and self.active[J].all()):
                raise ValueError("Entries requested for inactive DOFs")
        x = self.points.coords
        normals = None if self.normals is None else self.normals[J]
        block = self.kernel.evaluate(x[I], x[J], normals) * self.weights[J][None, :]
        rows, cols = np.nonzero(I[:, None] == J[None, :])
        block[rows, cols] = self.diagonal[I[rows]]
        if self.near is not None:
            block += self.near[I][:, J].toarray()
        if self.cache is not None:
            self.cache.gather(I, J, block)
        return block

    def proxy_rows(self, B: np.ndarray, proxies: PointSet, adjoint: bool = False) -> np.ndarray:
        """
        Proxy interactions with the columns B, scaled like the matrix entries.
        With adjoint=True, the rows span the transposed orientation.
        """
        x = self.points.coords[B]
        if adjoint:
            scale = float(np.mean(self.weights))
            return self.kernel.evaluate_adjoint_proxy(x, proxies.coords).conj().T * scale
        normals = None if self.normals is None else self.normals[B]
        return self.kernel.evaluate(proxies.coords, x, normals) * self.weights[B][None, :]

    def add_update(self, I, J, correction: np.ndarray):
        if self.cache is None:
            raise ValueError("Source is not bound to a factorization")
        I = np.asarray(I, dtype=np.int64).reshape(-1)
        J = np.asarray(J, dtype=np.int64).reshape(-1)
        if correction.shape != (I.size, J.size):
            raise ValueError(f"Correction shape {correction.shape} != ({I.size}, {J.size})")
        if not (self.active[I].all() and self.active[J].all()):
            raise ValueError("Updates must reference active DOFs")
        if I.size and J.size:
            self.cache.add(I, J, correction)

    def promote_level(self, tree: Tree, state=None):
        """Restrict the cache to active DOFs and re-key it to the parent level"""
        if self.cache is None:
            return
        active = self.active if state is None else state.active
        before = len(self.cache)
        self.cache.promote(active)
        logging.debug(f"Promoted cache to depth {self.cache.depth}: {before} -> {len(self.cache)} blocks")

    def far_field_violations(self, tree: Tree, box_id: int) -> list:
        """Cached pairs that touch a box and a cell outside its 5x5 stencil"""
        if self.cache is None:
            return []
        box = tree.box(box_id)
        if box.depth != self.cache.depth:
            raise ValueError(f"Box {box_id} is at depth {box.depth}, cache at depth {self.cache.depth}")
        cell = np.array(box.cell)
        bad = []
        for key_a, key_b in self.cache.pairs():
            for mine, other in ((key_a, key_b), (key_b, key_a)):
                if np.array_equal(mine, cell) and np.abs(np.array(other) - cell).max() > CREATION_REACH:
                    bad.append((key_a, key_b))
        return bad
