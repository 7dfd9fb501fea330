#!/usr/bin/env python3
"""
Tests for RS-S / RS-WS factorizations against dense oracles
"""
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pathlib import Path

import numpy as np
import pytest

from factorization import factor_rss, factor_rsws, load_factorization, save_factorization
from geometry import build_tree
from problems import build_cube3d, build_gaussian_spd, build_sphere_dlp, build_square2d, random_points
from matrixsource import MatrixSource
from verify import dense_assemble, factor_linop, forward_error, pcg_solve, source_linop


def square_setup(n_per_side: int, n_occ: int = 16):
    _, src = build_square2d(n_per_side)
    return src, build_tree(src.points, n_occ=n_occ)


def dense_factor(F) -> np.ndarray:
    return F.apply(np.eye(F.n))


def test_exact_mode_matches_dense_square2d():
    """Test eps=1e-15 on N=256 reproduces K to 1e-12 (Frobenius)"""
    src, tree = square_setup(16)
    K = dense_assemble(src)
    for factor in (factor_rss, factor_rsws):
        F = factor(src, tree, 1e-15, check=True)
        err = np.linalg.norm(dense_factor(F) - K) / np.linalg.norm(K)
        assert err <= 1e-12, f"{F.method}: relative error {err:.2e}"
    print("✅ test_exact_mode_matches_dense_square2d passed")


def test_solve_inverts_apply():
    """Test solve(apply(x)) = x for vectors and blocks, forward and adjoint"""
    src, tree = square_setup(16)
    rng = np.random.default_rng(0)
    for factor in (factor_rss, factor_rsws):
        F = factor(src, tree, 1e-9)
        X = rng.standard_normal((src.n, 10))
        for adjoint in (False, True):
            Y = F.solve(F.apply(X, adjoint=adjoint), adjoint=adjoint)
            err = np.linalg.norm(Y - X) / np.linalg.norm(X)
            assert err <= 1e-10, f"{F.method} adjoint={adjoint}: {err:.2e}"
        x = X[:, 0]
        assert np.allclose(F.apply(x), F.apply(X)[:, 0], atol=1e-13)
    print("✅ test_solve_inverts_apply passed")


def test_forward_error_tracks_tolerance():
    """Test ||K - F|| / ||K|| <= 100 eps on N=1024 for both methods"""
    src, tree = square_setup(32)
    K = dense_assemble(src)
    norm = np.linalg.norm(K, 2)
    for factor in (factor_rss, factor_rsws):
        for eps in (1e-6, 1e-9):
            F = factor(src, tree, eps)
            err = np.linalg.norm(dense_factor(F) - K, 2) / norm
            assert err <= 100 * eps, f"{F.method} eps={eps}: e_a={err:.2e}"
    print("✅ test_forward_error_tracks_tolerance passed")


def test_direct_far_field_matches_proxy():
    """Test the explicit far-field path gives the same accuracy as the proxy path"""
    src, tree = square_setup(32)
    K = dense_assemble(src)
    norm = np.linalg.norm(K, 2)
    F_direct = factor_rss(src, tree, 1e-9, use_proxy=False)
    F_proxy = factor_rss(src, tree, 1e-9)
    errors = [np.linalg.norm(dense_factor(F) - K, 2) / norm for F in (F_direct, F_proxy)]
    assert max(errors) <= 1e-7, f"Errors {errors}"
    assert errors[1] <= 10 * errors[0], f"Proxy error {errors[1]:.2e} vs direct {errors[0]:.2e}"
    print("✅ test_direct_far_field_matches_proxy passed")


def test_skeleton_sizes_per_level():
    """Test one skeleton size per strongly skeletonized level and factor counts"""
    src, tree = square_setup(32)
    F = factor_rss(src, tree, 1e-6)
    assert tree.root_level == 4
    assert len(F.skeleton_sizes) == 2
    assert all(k > 0 for k in F.skeleton_sizes)
    counts = F.factor_counts()
    assert counts[(1, "strong")] == 64 and counts[(2, "strong")] == 16
    assert F.diagonal.covers(F.n), "D must cover every DOF exactly once"

    G = factor_rsws(src, tree, 1e-6)
    counts = G.factor_counts()
    assert counts[(1, "weak")] == 64 and counts[(3, "weak")] == 4
    assert G.diagonal.covers(G.n)
    print("✅ test_skeleton_sizes_per_level passed")


def test_cube3d_accuracy():
    """Test the 3D volume problem at N=512"""
    _, src = build_cube3d(8)
    tree = build_tree(src.points, n_occ=8)
    K = dense_assemble(src)
    F = factor_rss(src, tree, 1e-6, check=True)
    err = np.linalg.norm(dense_factor(F) - K, 2) / np.linalg.norm(K, 2)
    assert err <= 1e-4, f"e_a={err:.2e}"
    print("✅ test_cube3d_accuracy passed")


def test_sphere_adjoint_consistency():
    """Test <F x, y> = <x, F* y> and the same for the inverse on the unsymmetric sphere"""
    _, _, src = build_sphere_dlp(2)
    tree = build_tree(src.points, n_occ=16)
    F = factor_rss(src, tree, 1e-6)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal(src.n), rng.standard_normal(src.n)
    for forward in (F.apply, F.solve):
        lhs = np.dot(forward(x), y)
        rhs = np.dot(x, forward(y, adjoint=True))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs)), f"{lhs} != {rhs}"
    K = dense_assemble(src)
    err = np.linalg.norm(dense_factor(F) - K, 2) / np.linalg.norm(K, 2)
    assert err <= 1e-4, f"e_a={err:.2e}"
    print("✅ test_sphere_adjoint_consistency passed")


def test_spd_logdet_and_square_root():
    """Test gaussian-spd N=512: logdet vs dense and F^{1/2} (F^{1/2})* = F"""
    src = build_gaussian_spd(random_points(512, seed=0))
    tree = build_tree(src.points, n_occ=32)
    F = factor_rss(src, tree, 1e-9, spd=True)
    sign, logdet = np.linalg.slogdet(dense_assemble(src))
    assert sign > 0
    assert abs(F.logdet() - logdet) <= 1e-6 * abs(logdet), f"{F.logdet()} vs {logdet}"

    rng = np.random.default_rng(2)
    for _ in range(3):
        x = rng.standard_normal(src.n)
        Fx = F.apply(x)
        root = F.apply_sqrt(F.apply_sqrt(x, adjoint=True))
        assert np.linalg.norm(root - Fx) <= 1e-10 * np.linalg.norm(Fx)
        assert np.allclose(F.solve_sqrt(F.apply_sqrt(x)), x, atol=1e-8)
    print("✅ test_spd_logdet_and_square_root passed")


def test_logdet_of_doubled_matrix():
    """Test rebuilding with 2K shifts logdet by N log 2"""
    src = build_gaussian_spd(random_points(256, seed=2))
    doubled = MatrixSource(kernel=src.kernel, points=src.points, weights=2 * src.weights, diagonal=2 * src.diagonal)
    tree = build_tree(src.points, n_occ=32)
    F = factor_rss(src, tree, 1e-9, spd=True)
    G = factor_rss(doubled, tree, 1e-9, spd=True)
    shift = G.logdet() - F.logdet()
    assert abs(shift - src.n * np.log(2)) <= 1e-6 * src.n, f"Shift {shift} vs {src.n * np.log(2)}"
    print("✅ test_logdet_of_doubled_matrix passed")


def test_square_root_samples_have_covariance_k():
    """Test the sample covariance of F^{1/2} z approaches K"""
    src = build_gaussian_spd(random_points(128, seed=3))
    tree = build_tree(src.points, n_occ=16)
    F = factor_rss(src, tree, 1e-9, spd=True)
    K = dense_assemble(src)
    draws = 20000
    Z = np.random.default_rng(4).standard_normal((src.n, draws))
    Y = F.apply_sqrt(Z)
    cov = Y @ Y.T / draws
    err = np.linalg.norm(cov - K) / np.linalg.norm(K)
    # sampling error of a Wishart estimate: sqrt((1 + tr(K)^2 / ||K||_F^2) / draws)
    expected = np.sqrt((1 + np.trace(K) ** 2 / np.linalg.norm(K) ** 2) / draws)
    assert err <= 3 * expected, f"Covariance error {err:.2e}, sampling level {expected:.2e}"
    print("✅ test_square_root_samples_have_covariance_k passed")


def test_argument_validation():
    """Test bad methods, negative eps and spd on unsymmetric sources are rejected"""
    src, tree = square_setup(8)
    with pytest.raises(ValueError):
        factor_rss(src, tree, -1.0)
    _, _, sphere = build_sphere_dlp(1)
    sphere_tree = build_tree(sphere.points, n_occ=16)
    with pytest.raises(ValueError):
        factor_rss(sphere, sphere_tree, 1e-6, spd=True)
    with pytest.raises(ValueError):
        factor_rss(sphere, tree, 1e-6)
    F = factor_rss(src, tree, 1e-6)
    with pytest.raises(ValueError):
        F.logdet()
    with pytest.raises(ValueError):
        F.apply(np.ones(src.n + 1))
    with pytest.raises(ValueError):
        F.apply(np.float64(1.0))
    with pytest.raises(ValueError):
        F.solve(np.ones((src.n, 2, 2)))
    print("✅ test_argument_validation passed")


def test_save_and_load(tmp_path):
    """Test a saved factorization applies and solves identically after loading"""
    src, tree = square_setup(16)
    F = factor_rsws(src, tree, 1e-9)
    path = tmp_path / "factor.npz"
    save_factorization(F, path)
    G = load_factorization(path)
    assert (G.n, G.method, G.eps, G.skeleton_sizes) == (F.n, F.method, F.eps, F.skeleton_sizes)
    x = np.random.default_rng(3).standard_normal(src.n)
    assert np.allclose(G.apply(x), F.apply(x), rtol=1e-12, atol=0)
    assert np.allclose(G.solve(x), F.solve(x), rtol=1e-12, atol=0)

    bogus = tmp_path / "bogus.npz"
    np.savez(bogus, header=np.array('{"magic": "OTHER"}'))
    with pytest.raises(ValueError):
        load_factorization(bogus)
    print("✅ test_save_and_load passed")


@pytest.mark.slow
def test_rsws_uses_less_memory():
    """Test m_f(RS-WS) < m_f(RS-S) for square2d N=64^2 and cube3d N=16^3 at eps=1e-6"""
    _, square = build_square2d(64)
    _, cube = build_cube3d(16)
    for src, n_occ in ((square, 256), (cube, 64)):
        tree = build_tree(src.points, n_occ=n_occ)
        strong = factor_rss(src, tree, 1e-6)
        hybrid = factor_rsws(src, tree, 1e-6)
        assert hybrid.nbytes < strong.nbytes, f"N={src.n}: {hybrid.nbytes} >= {strong.nbytes}"
    print("✅ test_rsws_uses_less_memory passed")


@pytest.mark.slow
def test_desk_scale_accuracy_square2d():
    """Test square2d N=64^2: power-method e_a <= 100 eps for both methods at eps 1e-6 and 1e-9"""
    _, src = build_square2d(64)
    tree = build_tree(src.points, n_occ=256)
    K = source_linop(src)
    x = np.random.default_rng(5).standard_normal(src.n)
    for factor in (factor_rss, factor_rsws):
        for eps in (1e-6, 1e-9):
            F = factor(src, tree, eps)
            e_a = forward_error(K, F)
            assert e_a <= 100 * eps, f"{F.method} eps={eps}: e_a={e_a:.2e}"
            assert np.linalg.norm(F.solve(F.apply(x)) - x) <= 1e-10 * np.linalg.norm(x)
    print("✅ test_desk_scale_accuracy_square2d passed")


@pytest.mark.slow
def test_desk_scale_accuracy_cube3d():
    """Test cube3d N=16^3 at eps 1e-6: e_a <= 1e-4 and preconditioned CG in at most 5 iterations"""
    _, src = build_cube3d(16)
    tree = build_tree(src.points, n_occ=64)
    K = source_linop(src)
    b = K.matvec(np.random.default_rng(6).standard_normal(src.n))
    for factor in (factor_rss, factor_rsws):
        F = factor(src, tree, 1e-6)
        e_a = forward_error(K, F)
        assert e_a <= 1e-4, f"{F.method}: e_a={e_a:.2e}"
        result = pcg_solve(K, b, M_inv=factor_linop(F, inverse=True), rtol=1e-12, maxit=100)
        assert result.converged and result.iterations <= 5, f"{F.method}: n_i={result.iterations}"
    print("✅ test_desk_scale_accuracy_cube3d passed")


if __name__ == "__main__":
    import tempfile
    test_exact_mode_matches_dense_square2d()
    test_solve_inverts_apply()
    test_forward_error_tracks_tolerance()
    test_direct_far_field_matches_proxy()
    test_skeleton_sizes_per_level()
    test_cube3d_accuracy()
    test_sphere_adjoint_consistency()
    test_spd_logdet_and_square_root()
    test_logdet_of_doubled_matrix()
    test_square_root_samples_have_covariance_k()
    test_argument_validation()
    test_save_and_load(Path(tempfile.mkdtemp()))
    test_rsws_uses_less_memory()
    test_desk_scale_accuracy_square2d()
    test_desk_scale_accuracy_cube3d()
    print("\n🎉 All tests passed!")
