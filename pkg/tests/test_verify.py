#!/usr/bin/env python3
"""
Tests for the power-method error estimates, operators and conjugate gradients
"""
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
from scipy.sparse.linalg import aslinearoperator

from factorization import factor_rss
from geometry import build_tree
from problems import build_sphere_dlp, build_square2d
from verify import (
    CGBreakdown,
    dense_assemble,
    est_opnorm_diff,
    factor_linop,
    forward_error,
    inverse_error,
    pcg_solve,
    source_linop,
)


def square_factor(n_per_side: int, eps: float, n_occ: int = 16):
    _, src = build_square2d(n_per_side)
    tree = build_tree(src.points, n_occ=n_occ)
    return src, factor_rss(src, tree, eps)


def test_opnorm_of_identical_operators_is_zero():
    """Test ||A - A|| = 0"""
    A = np.random.default_rng(0).standard_normal((20, 20))
    assert est_opnorm_diff(A, A).value == 0.0
    print("✅ test_opnorm_of_identical_operators_is_zero passed")


def test_opnorm_of_scaled_identity():
    """Test ||2I - I|| = 1 on N=10"""
    est = est_opnorm_diff(2 * np.eye(10), np.eye(10))
    assert abs(est.value - 1.0) <= 1e-12 and est.converged
    print("✅ test_opnorm_of_scaled_identity passed")


def test_opnorm_matches_svd():
    """Test a random 50x50 pair against the largest singular value"""
    rng = np.random.default_rng(1)
    A, B = rng.standard_normal((50, 50)), rng.standard_normal((50, 50))
    exact = np.linalg.svd(A - B, compute_uv=False)[0]
    est = est_opnorm_diff(A, B, tol=1e-8, maxit=2000)
    assert abs(est.value - exact) <= 1e-2 * exact, f"{est.value} vs {exact}"
    assert est_opnorm_diff(A, B, seed=4).value == est_opnorm_diff(A, B, seed=4).value, "Seeded runs repeat"
    with pytest.raises(ValueError):
        est_opnorm_diff(A, np.eye(3))
    print("✅ test_opnorm_matches_svd passed")


def test_dense_assemble_limit():
    """Test the dense oracle refuses sizes above its limit"""
    _, src = build_square2d(4)
    assert dense_assemble(src).shape == (16, 16)
    assert dense_assemble(src, idx=[0, 3]).shape == (2, 2)
    with pytest.raises(ValueError):
        dense_assemble(src, limit=10)
    print("✅ test_dense_assemble_limit passed")


def test_chunked_operator_matches_dense():
    """Test chunked kernel rows and the adjoint agree with the dense operator"""
    _, _, src = build_sphere_dlp(1)
    dense = source_linop(src, dense=True)
    chunked = source_linop(src, dense=False)
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal(src.n), rng.standard_normal(src.n)
    assert np.allclose(chunked.matvec(x), dense.matvec(x), atol=1e-13)
    assert np.allclose(chunked.rmatvec(y), dense.rmatvec(y), atol=1e-13)
    assert abs(np.dot(chunked.matvec(x), y) - np.dot(x, chunked.rmatvec(y))) <= 1e-12 * np.linalg.norm(x) * np.linalg.norm(y)
    print("✅ test_chunked_operator_matches_dense passed")


def test_error_estimates_of_accurate_factorization():
    """Test e_a and e_s are tiny for a near-exact factorization"""
    src, F = square_factor(16, 1e-12)
    K = source_linop(src)
    assert forward_error(K, F) <= 1e-9
    assert inverse_error(K, F) <= 1e-8
    print("✅ test_error_estimates_of_accurate_factorization passed")


def test_inverse_error_bounds_relative_inverse_error():
    """Test e_s bounds ||K^-1 - F^-1|| / ||K^-1|| on a loose factorization"""
    src, F = square_factor(16, 1e-4)
    K = dense_assemble(src)
    e_s = inverse_error(K, F, tol=1e-4)
    K_inv = np.linalg.inv(K)
    F_inv = F.solve(np.eye(src.n))
    rel = np.linalg.norm(K_inv - F_inv, 2) / np.linalg.norm(K_inv, 2)
    assert rel <= 1.05 * e_s, f"{rel:.2e} > e_s={e_s:.2e}"
    print("✅ test_inverse_error_bounds_relative_inverse_error passed")


def test_factor_operator_inverse():
    """Test factor_linop(F, inverse=True) undoes factor_linop(F)"""
    src, F = square_factor(16, 1e-9)
    x = np.random.default_rng(3).standard_normal(src.n)
    forward, inverse = factor_linop(F), factor_linop(F, inverse=True)
    assert np.allclose(inverse.matvec(forward.matvec(x)), x, atol=1e-10)
    assert np.allclose(inverse.rmatvec(forward.rmatvec(x)), x, atol=1e-10)
    print("✅ test_factor_operator_inverse passed")


def test_cg_identity_one_iteration():
    """Test CG on the identity converges in one iteration"""
    b = np.random.default_rng(4).standard_normal(10)
    result = pcg_solve(np.eye(10), b)
    assert result.converged and result.iterations == 1
    assert np.allclose(result.x, b)
    print("✅ test_cg_identity_one_iteration passed")


def test_cg_spd_system_and_breakdown():
    """Test CG solves an SPD system and reports non-SPD input"""
    rng = np.random.default_rng(5)
    G = rng.standard_normal((30, 30))
    A = G @ G.T + 30 * np.eye(30)
    b = rng.standard_normal(30)
    result = pcg_solve(A, b, rtol=1e-12)
    assert result.converged
    assert np.linalg.norm(b - A @ result.x) <= 1e-11 * np.linalg.norm(b)
    assert result.residuals[0] == 1.0 and result.residuals[-1] <= 1e-12

    with pytest.raises(CGBreakdown):
        pcg_solve(-np.eye(5), np.ones(5))
    print("✅ test_cg_spd_system_and_breakdown passed")


def test_cg_error_energy_norm_never_grows():
    """Test ||x* - x_k||_A is nonincreasing over iterations, with and without a preconditioner"""
    rng = np.random.default_rng(8)
    G = rng.standard_normal((40, 40))
    A = G @ G.T + np.eye(40)
    b = rng.standard_normal(40)
    exact = np.linalg.solve(A, b)
    for M_inv in (None, np.diag(1.0 / np.diag(A))):
        errors = []
        for k in range(1, 16):
            e = exact - pcg_solve(A, b, M_inv=M_inv, rtol=0.0, maxit=k).x
            errors.append(float(np.sqrt(e @ A @ e)))
        drops = [b_k <= a_k * (1 + 1e-10) for a_k, b_k in zip(errors, errors[1:])]
        assert all(drops), f"A-norm error grew: {errors}"
    print("✅ test_cg_error_energy_norm_never_grows passed")


def test_factorization_preconditions_cg():
    """Test F^{-1} as preconditioner brings CG to 1e-12 in a few iterations"""
    src, F = square_factor(16, 1e-9)
    K = source_linop(src)
    b = K.matvec(np.random.default_rng(6).standard_normal(src.n))
    result = pcg_solve(K, b, M_inv=factor_linop(F, inverse=True), rtol=1e-12)
    assert result.converged and result.iterations <= 3, f"n_i={result.iterations}"
    print("✅ test_factorization_preconditions_cg passed")


@pytest.mark.slow
def test_preconditioning_at_desk_scale():
    """Test square2d N=64^2: preconditioned n_i <= 5, unpreconditioned CG exceeds 100 iterations"""
    _, src = build_square2d(64)
    tree = build_tree(src.points, n_occ=256)
    F = factor_rss(src, tree, 1e-6)
    K = source_linop(src)
    assert forward_error(K, F) <= 1e-4
    b = K.matvec(np.random.default_rng(7).standard_normal(src.n))
    pre = pcg_solve(K, b, M_inv=factor_linop(F, inverse=True), rtol=1e-12, maxit=100)
    assert pre.converged and pre.iterations <= 5, f"n_i={pre.iterations}"
    plain = pcg_solve(aslinearoperator(K), b, rtol=1e-12, maxit=100)
    assert not plain.converged
    print("✅ test_preconditioning_at_desk_scale passed")


if __name__ == "__main__":
    test_opnorm_of_identical_operators_is_zero()
    test_opnorm_of_scaled_identity()
    test_opnorm_matches_svd()
    test_dense_assemble_limit()
    test_chunked_operator_matches_dense()
    test_error_estimates_of_accurate_factorization()
    test_inverse_error_bounds_relative_inverse_error()
    test_factor_operator_inverse()
    test_cg_identity_one_iteration()
    test_cg_spd_system_and_breakdown()
    test_cg_error_energy_norm_never_grows()
    test_factorization_preconditions_cg()
    test_preconditioning_at_desk_scale()
    print("\n🎉 All tests passed!")
