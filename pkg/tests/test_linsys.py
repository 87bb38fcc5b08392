import numpy as np
import pytest
import scipy.sparse as sp

from gridslack.linsys import LinearSolver, SingularityReport, SparseSystem, factor_solve


def _check(A, b, x):
    r = np.abs(A @ x - b).max()
    assert r <= 1e-10 * max(1.0, np.abs(b).max())


def test_identity():
    b = np.zeros(5)
    b[0] = 1
    x = factor_solve(SparseSystem(sp.eye(5), b))
    np.testing.assert_array_equal(x, b)


def test_two_by_two():
    x = factor_solve(SparseSystem([[2.0, 1.0], [1.0, 2.0]], [3.0, 3.0]))
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-15)


def test_triplets_sum_duplicates():
    s = SparseSystem.from_triplets(2, [0, 0, 1, 1], [0, 0, 1, 0], [1.0, 1.0, 4.0, 1.0], [2.0, 5.0])
    np.testing.assert_allclose(factor_solve(s), [1.0, 1.0])


def _random_system(n, seed):
    rng = np.random.default_rng(seed)
    M = sp.random(n, n, density=0.08, random_state=rng)
    A = (M + M.T) + sp.diags(np.full(n, 4.0 + n * 0.1))
    return sp.csc_matrix(A), rng.standard_normal(n)


def test_random_sparse_against_dense_oracle():
    A, b = _random_system(50, 0)
    x = factor_solve(SparseSystem(A, b))
    np.testing.assert_allclose(x, np.linalg.solve(A.toarray(), b), atol=1e-9)
    _check(A, b, x)


def test_unsymmetric_values_on_symmetric_pattern():
    A, b = _random_system(80, 1)
    A = A.tolil()
    A[3, 7], A[7, 3] = 2.5, -1.5
    A = A.tocsc()
    _check(A, b, factor_solve(SparseSystem(A, b)))


def test_singular_matrix_reports_pivot():
    A = sp.csc_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]]))
    with pytest.raises(SingularityReport) as exc:
        factor_solve(SparseSystem(A, np.ones(3)))
    assert exc.value.pivot == 1


def test_floating_subnetwork_is_singular():
    # two-node Laplacian with no reference: rank deficient
    A = sp.csc_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    with pytest.raises(SingularityReport):
        factor_solve(SparseSystem(A, np.array([1.0, -1.0])))


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        SparseSystem(sp.csc_matrix((0, 0)), np.zeros(0))
    with pytest.raises(ValueError):
        SparseSystem(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        SparseSystem(np.eye(2), np.ones(3))


def test_ordering_reused_for_identical_pattern():
    solver = LinearSolver()
    A, b = _random_system(60, 2)
    x1 = solver.solve(A, b)
    assert solver.symbolic_reuses == 0
    A2 = A.copy()
    A2.data = A2.data * 1.7
    x2 = solver.solve(A2, b)
    assert solver.symbolic_reuses == 1
    np.testing.assert_allclose(x2, x1 / 1.7, rtol=1e-10)
    _check(A2, b, x2)


def test_deterministic():
    A, b = _random_system(70, 3)
    xs = [factor_solve(SparseSystem(A, b)).tobytes() for _ in range(3)]
    assert len(set(xs)) == 1
