#!/usr/bin/env python3
"""
Point sets, adaptive quadtrees/octrees and near/far-field classification.

Levels are counted from the bottom: level 1 holds the deepest boxes and the
root sits at level L. A box at depth d (root depth 0) has level L - d.
"""
import logging
import os
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np

# Configuration
PROXY_RADIUS = float(os.environ.get("RSKEL_PROXY_RADIUS", "2.5"))
MAX_DEPTH = int(os.environ.get("RSKEL_MAX_DEPTH", "24"))
ROOT_MARGIN = 1e-12
PROXY_SEED = 20170615


@dataclass(frozen=True)
class PointSet:
    """N points in R^dim, dim in {2, 3}"""
    coords: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] not in (2, 3):
            raise ValueError(f"Points must have shape (N, 2) or (N, 3), got {coords.shape}")
        if coords.shape[0] == 0:
            raise ValueError("Point set is empty")
        if not np.all(np.isfinite(coords)):
            raise ValueError("Point coordinates must be finite")
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def __len__(self) -> int:
        return self.coords.shape[0]


def as_points(points) -> PointSet:
    if isinstance(points, PointSet):
        return points
    return PointSet(np.asarray(points, dtype=float))


@dataclass
class Box:
    """A cube of the tree"""
    id: int
    center: np.ndarray
    sidelength: float
    depth: int
    level: int
    cell: tuple  # integer coordinates on the grid of this depth
    dof_ids: np.ndarray
    parent: Optional[int] = None
    children: list[int] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class Tree:
    points: PointSet
    boxes: list[Box]
    levels: list[list[int]]  # levels[l - 1] is the ordered box list of level l
    root_level: int
    n_occ: int
    root_center: np.ndarray
    root_side: float
    point_cells: np.ndarray  # cell of every point on the grid of the deepest depth
    _index: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.points.dim

    @property
    def max_depth(self) -> int:
        return self.root_level - 1

    @property
    def leaves(self) -> list[int]:
        return [b.id for b in self.boxes if b.is_leaf]

    def level_boxes(self, level: int) -> list[int]:
        if not 1 <= level <= self.root_level:
            raise ValueError(f"Level {level} outside 1..{self.root_level}")
        return self.levels[level - 1]

    def box(self, box_id: int) -> Box:
        if not isinstance(box_id, (int, np.integer)) or not 0 <= box_id < len(self.boxes):
            raise ValueError(f"Invalid box id: {box_id}")
        return self.boxes[box_id]

    def box_at(self, depth: int, cell) -> Optional[int]:
        return self._index.get((depth, tuple(int(c) for c in cell)))

    def cells_at(self, dofs: np.ndarray, depth: int) -> np.ndarray:
        """Grid cells of the given points at a given depth"""
        return self.point_cells[dofs] >> (self.max_depth - depth)

    def has_distant_cells(self, box_id: int) -> bool:
        """True if the grid of the box's depth has cells outside its 5x5 stencil"""
        box = self.box(box_id)
        side = 1 << box.depth
        return any(max(c, side - 1 - c) >= 3 for c in box.cell)


def _group_by_cell(idx: np.ndarray, cells: np.ndarray):
    keys, inverse = np.unique(cells[idx], axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(keys))
    groups = np.split(idx[order], np.cumsum(counts)[:-1])
    return [tuple(int(v) for v in k) for k in keys], groups


def build_tree(points, n_occ: int = 64) -> Tree:
    """
    Build an adaptive 2^dim-tree over a point set.

    Every box with more than n_occ points is split; empty children are pruned.
    Boxes are numbered bottom-up, level by level, cells in lexicographic order.
    """
    pts = as_points(points)
    if n_occ < 1:
        raise ValueError(f"n_occ must be >= 1, got {n_occ}")

    coords = pts.coords
    n, dim = coords.shape
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    side = float((hi - lo).max())
    side = side * (1.0 + 2.0 * ROOT_MARGIN) if side > 0 else 1.0
    center = (lo + hi) / 2.0

    cells = np.zeros((n, dim), dtype=np.int64)
    centers = np.tile(center, (n, 1))
    member = np.ones(n, dtype=bool)
    by_depth = []
    box_side = side
    while True:
        depth = len(by_depth)
        keys, groups = _group_by_cell(np.flatnonzero(member), cells)
        by_depth.append((keys, groups))
        split = [len(g) > n_occ for g in groups]
        if not any(split):
            break
        if depth == MAX_DEPTH:
            logging.warning(f"Refinement cap {MAX_DEPTH} reached with boxes above n_occ={n_occ} (coincident points?)")
            break
        member[:] = False
        for g, s in zip(groups, split):
            if s:
                member[g] = True
        # Ties at the midpoint go to the lower child
        bit = (coords > centers).astype(np.int64)
        cells = 2 * cells + bit
        centers += (bit - 0.5) * (box_side / 2.0)
        box_side /= 2.0

    root_level = len(by_depth)
    corner = center - side / 2.0
    boxes: list[Box] = []
    index = {}
    levels = []
    for depth in range(root_level - 1, -1, -1):
        keys, groups = by_depth[depth]
        level_ids = []
        d_side = side / (1 << depth)
        for key, group in zip(keys, groups):
            box_id = len(boxes)
            boxes.append(Box(
                id=box_id,
                center=corner + (np.array(key) + 0.5) * d_side,
                sidelength=d_side,
                depth=depth,
                level=root_level - depth,
                cell=key,
                dof_ids=np.sort(group),
            ))
            index[(depth, key)] = box_id
            level_ids.append(box_id)
        levels.append(level_ids)

    for box in boxes:
        if box.depth > 0:
            parent = index[(box.depth - 1, tuple(c >> 1 for c in box.cell))]
            box.parent = parent
            boxes[parent].children.append(box.id)

    tree = Tree(
        points=pts,
        boxes=boxes,
        levels=levels,
        root_level=root_level,
        n_occ=n_occ,
        root_center=center,
        root_side=side,
        point_cells=cells,
        _index=index,
    )
    logging.info(f"Tree: N={n}, dim={dim}, levels={root_level}, boxes={len(boxes)}, leaves={len(tree.leaves)}")
    return tree


def _stencil(dim: int, radius: int):
    """Offsets of the (2r+1)^dim stencil without the origin, lexicographic"""
    return [off for off in product(range(-radius, radius + 1), repeat=dim) if any(off)]


def box_neighbors(tree: Tree, box_id: int) -> list[int]:
    """Same-level boxes whose closed cubes touch the closed cube of box_id"""
    box = tree.box(box_id)
    out = []
    for off in _stencil(tree.dim, 1):
        other = tree.box_at(box.depth, np.add(box.cell, off))
        if other is not None:
            out.append(other)
    return out


@dataclass
class ActiveState:
    """Which DOFs are still coupled, plus the per-box skeleton/redundant split"""
    active: np.ndarray
    skeleton_of: dict = field(default_factory=dict)
    redundant_of: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, n: int) -> "ActiveState":
        return cls(active=np.ones(n, dtype=bool))

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def deactivate(self, box_id: int, redundant: np.ndarray, skeleton: np.ndarray):
        if redundant.size and not self.active[redundant].all():
            raise ValueError(f"Box {box_id}: redundant DOFs already inactive")
        self.active[redundant] = False
        previous = self.redundant_of.get(box_id)
        self.redundant_of[box_id] = redundant if previous is None else np.concatenate([previous, redundant])
        self.skeleton_of[box_id] = skeleton

    def active_in(self, box: Box) -> np.ndarray:
        return box.dof_ids[self.active[box.dof_ids]]


def _coarse_leaves_near(tree: Tree, box: Box, radius: int) -> list[Box]:
    """Leaves shallower than box whose cube overlaps the (2r+1)-stencil region of box"""
    out = []
    lo = np.array(box.cell) - radius
    hi = np.array(box.cell) + radius
    for other in tree.boxes:
        if not other.is_leaf or other.depth >= box.depth:
            continue
        shift = box.depth - other.depth
        o_lo = np.array(other.cell) << shift
        o_hi = ((np.array(other.cell) + 1) << shift) - 1
        if np.all(o_lo <= hi) and np.all(o_hi >= lo):
            out.append(other)
    return out


def active_dof_sets(tree: Tree, state: ActiveState, box_id: int):
    """
    Return (B, N, O) for a box.

    B are the active DOFs of the box, N those of touching same-level boxes and
    O those of the remaining boxes of the 5x5(x5) stencil. Active DOFs of
    shallower leaves are classified by their cell on the box's grid.
    """
    box = tree.box(box_id)
    B = state.active_in(box)
    near, outer = [], []
    for off in _stencil(tree.dim, 2):
        other = tree.box_at(box.depth, np.add(box.cell, off))
        if other is None:
            continue
        dofs = state.active_in(tree.boxes[other])
        (near if max(abs(o) for o in off) <= 1 else outer).append(dofs)

    for leaf in _coarse_leaves_near(tree, box, 2):
        dofs = state.active_in(leaf)
        if dofs.size == 0:
            continue
        dist = np.abs(tree.cells_at(dofs, box.depth) - np.array(box.cell)).max(axis=1)
        near.append(dofs[dist <= 1])
        outer.append(dofs[dist == 2])

    empty = np.zeros(0, dtype=np.int64)
    N = np.concatenate(near) if near else empty
    O = np.concatenate(outer) if outer else empty
    return B, N.astype(np.int64), O.astype(np.int64)


def far_field_dofs(tree: Tree, state: ActiveState, box_id: int) -> np.ndarray:
    """All active DOFs outside the box and its near field (O included)"""
    B, N, _ = active_dof_sets(tree, state, box_id)
    mask = state.active.copy()
    mask[B] = False
    mask[N] = False
    return np.flatnonzero(mask)


def proxy_points(box: Box, n_p: int, radius: float = PROXY_RADIUS) -> PointSet:
    """
    Proxy surface for a box: a circle (2D, uniform) or sphere (3D, seeded
    random) of radius `radius` sidelengths around the box center.
    """
    if n_p < 1:
        raise ValueError(f"n_p must be >= 1, got {n_p}")
    dim = len(box.center)
    r = radius * box.sidelength
    if dim == 2:
        theta = 2.0 * np.pi * np.arange(n_p) / n_p
        unit = np.column_stack([np.cos(theta), np.sin(theta)])
    else:
        rng = np.random.default_rng(PROXY_SEED)
        unit = rng.standard_normal((n_p, 3))
        unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    return PointSet(box.center + r * unit)
