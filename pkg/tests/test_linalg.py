import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from sthdg.linalg import (DenseFactorization, SingularMatrixError, SparseMatrix,
                          batched_inverse, factor_sparse, generalized_min_singular_value,
                          inverse_sqrt_spd, min_singular_value, solve)


def _random_sparse(rng, n, density=0.1):
    A = sp.random(n, n, density=density, random_state=rng.integers(1 << 30))
    return (A + sp.eye(n) * (n * 0.5)).tocsc()


def test_sparse_factor_solves(rng):
    A = _random_sparse(rng, 80)
    b = rng.standard_normal(80)
    x = solve(factor_sparse(A), b)
    np.testing.assert_allclose(A @ x, b, atol=1e-11)


def test_complex_rhs_with_real_factor(rng):
    A = _random_sparse(rng, 30)
    b = rng.standard_normal(30) + 1j * rng.standard_normal(30)
    x = solve(factor_sparse(A), b)
    np.testing.assert_allclose(A @ x, b, atol=1e-11)


def test_complex_matrix(rng):
    A = (_random_sparse(rng, 25) + 1j * sp.eye(25)).tocsc()
    b = rng.standard_normal(25)
    np.testing.assert_allclose(A @ solve(factor_sparse(A), b), b, atol=1e-11)


def test_saddle_point_matrix(rng):
    # [[M, B^T], [B, 0]] is indefinite: needs a working pivot strategy
    M = sp.diags(rng.uniform(1, 2, 20))
    B = sp.csr_matrix(rng.standard_normal((5, 20)))
    K = sp.bmat([[M, B.T], [B, None]], format="csc")
    b = rng.standard_normal(25)
    np.testing.assert_allclose(K @ solve(factor_sparse(K), b), b, atol=1e-10)


def test_structurally_singular_reports_row():
    A = sp.csc_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]]))
    with pytest.raises(SingularMatrixError) as exc:
        factor_sparse(A)
    assert exc.value.row == 1


def test_numerically_singular():
    A = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularMatrixError):
        factor_sparse(A)


def test_non_square_rejected():
    with pytest.raises(ValueError):
        factor_sparse(sp.csc_matrix(np.ones((2, 3))))


def test_triplet_builder_sums_duplicates():
    S = SparseMatrix((3, 3))
    S.add([0, 0, 2], [1, 1, 2], [1.0, 2.0, 5.0])
    A = S.finalize().toarray()
    assert A[0, 1] == 3.0 and A[2, 2] == 5.0
    assert SparseMatrix((2, 2)).finalize().nnz == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_dense_lu_reconstructs(n, seed):
    A = np.random.default_rng(seed).standard_normal((n, n)) + 3 * n * np.eye(n)
    f = DenseFactorization.factor(A)
    np.testing.assert_allclose(f.reconstruct(), A, atol=1e-10)
    b = np.arange(n, dtype=float)
    np.testing.assert_allclose(A @ solve(f, b), b, atol=1e-9)


def test_dense_singular():
    with pytest.raises(SingularMatrixError):
        DenseFactorization.factor(np.zeros((3, 3)))


def test_singular_values(rng):
    A = rng.standard_normal((6, 4))
    assert min_singular_value(A) == pytest.approx(np.linalg.svd(A, compute_uv=False)[-1])
    M = rng.standard_normal((4, 4))
    M = M @ M.T + np.eye(4)
    R = inverse_sqrt_spd(M)
    np.testing.assert_allclose(R @ M @ R, np.eye(4), atol=1e-12)
    with pytest.raises(np.linalg.LinAlgError):
        inverse_sqrt_spd(-np.eye(2))
    # identity metrics reduce to the plain singular value
    assert generalized_min_singular_value(A, np.eye(6), np.eye(4)) == pytest.approx(
        min_singular_value(A))


def test_batched_inverse(rng):
    A = rng.standard_normal((5, 3, 3)) + 4 * np.eye(3)
    np.testing.assert_allclose(batched_inverse(A) @ A, np.broadcast_to(np.eye(3), A.shape),
                               atol=1e-12)
    A[3] = 0.0
    with pytest.raises(SingularMatrixError) as exc:
        batched_inverse(A)
    assert exc.value.row == 3
