#!/usr/bin/env python3
"""
Test problems: first-kind volume integral equations on the unit square and
cube, the second-kind double-layer equation on the unit sphere, and an SPD
Gaussian kernel fixture.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sps
from scipy import integrate
from scipy.spatial import cKDTree

from geometry import PointSet
from matrixsource import KernelSpec, MatrixSource

# Quadrature
DIAG_TOL = 1e-12
GAUSS_ORDER = 4
SPHERE_DIAGONAL = -0.5

# Harmonic reference
N_CHARGES = 16
SOURCE_RADIUS = 2.0
TARGET_RADIUS = 0.5

# Gaussian fixture defaults
GAUSSIAN_SIGMA = 0.1
GAUSSIAN_RIDGE = 1e-3


class ZeroFieldError(ValueError):
    """The reference field vanishes, so a relative error is undefined"""


@dataclass
class Discretization:
    points: PointSet
    weights: np.ndarray
    diagonal: np.ndarray
    kernel: KernelSpec
    normals: Optional[np.ndarray] = None
    areas: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("Quadrature weights must be positive")
        if self.normals is not None and not np.allclose(np.linalg.norm(self.normals, axis=1), 1.0):
            raise ValueError("Normals must have unit length")

    @property
    def n(self) -> int:
        return len(self.points)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    @cached_property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def normals(self) -> np.ndarray:
        return self._cross / np.linalg.norm(self._cross, axis=1, keepdims=True)

    @cached_property
    def diameters(self) -> np.ndarray:
        c = self.corners
        edges = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    def __len__(self) -> int:
        return len(self.triangles)


# =============================================================================
# Diagonal self-integrals
# =============================================================================

def square_self_integral(h: float) -> float:
    """
    Integral of -(1/2pi) log|y| over the square of side h centered at 0.

    The square splits into 8 triangles with the singular corner at the
    origin; y = a s (1, t) maps each to the unit square with Jacobian a^2 s.
    """
    a = h / 2.0

    def integrand(t, s):
        return s * (np.log(a * s) + 0.5 * np.log1p(t * t)) if s > 0 else 0.0

    value, _ = integrate.dblquad(integrand, 0.0, 1.0, 0.0, 1.0, epsabs=DIAG_TOL, epsrel=DIAG_TOL)
    return -8.0 * a * a * value / (2.0 * np.pi)


def cube_self_integral(h: float) -> float:
    """
    Integral of 1/(4pi|y|) over the cube of side h centered at 0.

    The cube splits into 24 pyramids with apex at the origin; y = a s (1, t, u)
    turns each into a^2/2 times a smooth integral over the unit square.
    """
    a = h / 2.0
    value, _ = integrate.dblquad(lambda u, t: 1.0 / np.sqrt(1.0 + t * t + u * u), 0.0, 1.0, 0.0, 1.0,
                                 epsabs=DIAG_TOL, epsrel=DIAG_TOL)
    return 24.0 * (a * a / 2.0) * value / (4.0 * np.pi)


# =============================================================================
# Volume problems
# =============================================================================

def _grid(n_per_side: int, dim: int) -> np.ndarray:
    h = 1.0 / n_per_side
    axis = (np.arange(n_per_side) + 0.5) * h
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.column_stack([m.reshape(-1) for m in mesh])


def _volume_problem(n_per_side: int, dim: int):
    if n_per_side < 2:
        raise ValueError(f"n_per_side must be >= 2, got {n_per_side}")
    points = PointSet(_grid(n_per_side, dim))
    n = len(points)
    h = 1.0 / n_per_side
    if dim == 2:
        kernel = KernelSpec("laplace2d-log", 2)
        diag = square_self_integral(h)
    else:
        kernel = KernelSpec("laplace3d", 3)
        diag = cube_self_integral(h)
    weights = np.full(n, 1.0 / n)
    disc = Discretization(points=points, weights=weights, diagonal=np.full(n, diag), kernel=kernel)
    src = MatrixSource(kernel=kernel, points=points, weights=weights, diagonal=disc.diagonal)
    logging.info(f"Volume problem dim={dim}: N={n}, diagonal={diag:.6e}")
    return disc, src


def build_square2d(n_per_side: int):
    """Collocation of -(1/2pi) log|x - y| on a uniform grid of [0,1]^2"""
    return _volume_problem(n_per_side, 2)


def build_cube3d(n_per_side: int):
    """Collocation of 1/(4pi|x - y|) on a uniform grid of [0,1]^3"""
    return _volume_problem(n_per_side, 3)


# =============================================================================
# Sphere
# =============================================================================

_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICOSA_VERTICES = np.array([
    [-1.0, _PHI, 0.0], [1.0, _PHI, 0.0], [-1.0, -_PHI, 0.0], [1.0, -_PHI, 0.0],
    [0.0, -1.0, _PHI], [0.0, 1.0, _PHI], [0.0, -1.0, -_PHI], [0.0, 1.0, -_PHI],
    [_PHI, 0.0, -1.0], [_PHI, 0.0, 1.0], [-_PHI, 0.0, -1.0], [-_PHI, 0.0, 1.0],
])
_ICOSA_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


def icosphere(level: int) -> TriangleMesh:
    """Icosahedron subdivided `level` times, vertices on the unit sphere, outward orientation"""
    if not isinstance(level, (int, np.integer)) or level < 0:
        raise ValueError(f"Refinement level must be a non-negative integer, got {level}")
    vertices = [v / np.linalg.norm(v) for v in _ICOSA_VERTICES]
    faces = [tuple(f) for f in _ICOSA_FACES]
    for _ in range(level):
        midpoint = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = vertices[i] + vertices[j]
                vertices.append(m / np.linalg.norm(m))
                midpoint[key] = len(vertices) - 1
            return midpoint[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            refined += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = refined

    verts = np.array(vertices)
    tris = np.array(faces, dtype=np.int64)
    c = verts[tris]
    outward = np.einsum("ij,ij->i", np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), c.mean(axis=1)) > 0
    tris[~outward] = tris[~outward][:, [0, 2, 1]]
    return TriangleMesh(vertices=verts, triangles=tris)


def export_mesh(mesh: TriangleMesh, path) -> None:
    """Whitespace-delimited text: 'nv nt', nv vertex lines, nt triangle lines"""
    with open(path, "w") as f:
        f.write(f"{len(mesh.vertices)} {len(mesh.triangles)}\n")
        np.savetxt(f, mesh.vertices, fmt="%.17g")
        np.savetxt(f, mesh.triangles, fmt="%d")


def triangle_rule(corners: np.ndarray, order: int = GAUSS_ORDER):
    """
    Tensor-product Gauss-Legendre rule mapped to triangles by the collapsed
    map y = v0 + s (v1 - v0) + s t (v2 - v1) on the unit square.

    corners has shape (m, 3, 3); returns nodes (m, q, 3) and weights (m, q).
    """
    g, w = np.polynomial.legendre.leggauss(order)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    s, t = (a.reshape(-1) for a in np.meshgrid(g, g, indexing="ij"))
    ws = np.outer(w, w).reshape(-1)
    v0, v1, v2 = corners[:, 0], corners[:, 1], corners[:, 2]
    nodes = (v0[:, None, :] + s[None, :, None] * (v1 - v0)[:, None, :]
             + (s * t)[None, :, None] * (v2 - v1)[:, None, :])
    twice_area = np.linalg.norm(np.cross(v1 - v0, v2 - v1), axis=1)
    weights = twice_area[:, None] * (ws * s)[None, :]
    return nodes, weights


def dlp_kernel(targets: np.ndarray, sources: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Pointwise double-layer kernel for matching rows of targets, sources and normals"""
    diff = targets - sources
    r = np.linalg.norm(diff, axis=-1)
    return np.sum(diff * normals, axis=-1) / (4.0 * np.pi * r ** 3)


def near_corrections(mesh: TriangleMesh, order: int = GAUSS_ORDER) -> sps.csr_matrix:
    """
    Replace the centroid rule by the Gauss rule for triangle pairs whose
    centroids are closer than the average triangle diameter. Self pairs stay 0.
    """
    centroids = mesh.centroids
    threshold = float(mesh.diameters.mean())
    pairs = cKDTree(centroids).query_pairs(threshold, output_type="ndarray")
    if len(pairs) == 0:
        return sps.csr_matrix((len(mesh), len(mesh)))
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    nodes, weights = triangle_rule(mesh.corners[cols], order)
    normals = mesh.normals[cols]
    gauss = np.sum(weights * dlp_kernel(centroids[rows][:, None, :], nodes, normals[:, None, :]), axis=1)
    centroid = mesh.areas[cols] * dlp_kernel(centroids[rows], centroids[cols], normals)
    n = len(mesh)
    return sps.csr_matrix((gauss - centroid, (rows, cols)), shape=(n, n))


def build_sphere_dlp(refinement_level: int):
    """
    Centroid collocation of (-1/2 I + D) u = f on the unit sphere, D the
    double-layer operator with outward normals.
    """
    mesh = icosphere(refinement_level)
    kernel = KernelSpec("laplace3d-dlp", 3)
    points = PointSet(mesh.centroids)
    disc = Discretization(
        points=points,
        weights=mesh.areas.copy(),
        diagonal=np.full(len(mesh), SPHERE_DIAGONAL),
        kernel=kernel,
        normals=mesh.normals,
        areas=mesh.areas,
    )
    src = MatrixSource(
        kernel=kernel,
        points=points,
        weights=disc.weights,
        diagonal=disc.diagonal,
        normals=mesh.normals,
        near=near_corrections(mesh),
    )
    logging.info(f"Sphere level {refinement_level}: {len(mesh)} triangles, near pairs={src.near.nnz}")
    return mesh, disc, src


@dataclass
class HarmonicField:
    sources: np.ndarray
    charges: np.ndarray
    targets: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return KernelSpec("laplace3d", 3).evaluate(x, self.sources) @ self.charges


def _sphere_points(rng, n: int, radius: float) -> np.ndarray:
    p = rng.standard_normal((n, 3))
    return radius * p / np.linalg.norm(p, axis=1, keepdims=True)


def harmonic_setup(seed: int = 0, charges: Optional[np.ndarray] = None) -> HarmonicField:
    """Random point charges at radius 2 and targets at radius 1/2"""
    rng = np.random.default_rng(seed)
    sources = _sphere_points(rng, N_CHARGES, SOURCE_RADIUS)
    targets = _sphere_points(rng, N_CHARGES, TARGET_RADIUS)
    q = rng.standard_normal(N_CHARGES) if charges is None else np.asarray(charges, dtype=float)
    return HarmonicField(sources=sources, charges=q, targets=targets)


def harmonic_reference(mesh: TriangleMesh, field: HarmonicField):
    """Boundary data at the collocation points and the exact field at the targets"""
    return field(mesh.centroids), field(field.targets)


def reconstruct_field(mesh: TriangleMesh, u: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Double-layer potential of the density u at interior targets"""
    K = KernelSpec("laplace3d-dlp", 3).evaluate(targets, mesh.centroids, mesh.normals)
    return K @ (mesh.areas * u)


def potential_error(mesh: TriangleMesh, field: HarmonicField, u: np.ndarray) -> float:
    """Relative l2 error of the reconstructed field over the targets"""
    exact = field(field.targets)
    norm = np.linalg.norm(exact)
    if norm == 0:
        raise ZeroFieldError("Reference field is zero at every target")
    approx = reconstruct_field(mesh, u, field.targets)
    return float(np.linalg.norm(approx - exact) / norm)


# =============================================================================
# Gaussian SPD fixture
# =============================================================================

def random_points(n: int, dim: int = 2, seed: int = 0) -> PointSet:
    return PointSet(np.random.default_rng(seed).random((n, dim)))


def build_gaussian_spd(points, sigma: float = GAUSSIAN_SIGMA, ridge: float = GAUSSIAN_RIDGE) -> MatrixSource:
    """exp(-|x_i - x_j|^2 / (2 sigma^2)) + ridge on the diagonal"""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    points = points if isinstance(points, PointSet) else PointSet(np.asarray(points, dtype=float))
    kernel = KernelSpec("gaussian-test", points.dim, sigma=sigma)
    return MatrixSource(kernel=kernel, points=points, weights=1.0, diagonal=1.0 + ridge)
