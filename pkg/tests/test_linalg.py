import numpy as np
import pytest

from services.exceptions import ContractError, DegenerateInputError, NumericalError, ShapeError
from services.linalg.linalg_service import (
    as_matrix,
    matmul,
    numerical_rank,
    principal_angles,
    qr_orthonormal_rows,
    random_orthogonal,
    skew_part,
    solve,
    svd,
    sym_eig,
)


def test_matmul_hand_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), a), a)
    assert np.array_equal(matmul(a, [[0, 1], [1, 0]]), [[2.0, 1.0], [4.0, 3.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_nonfinite_and_vectors():
    with pytest.raises(ContractError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])


def test_qr_orthonormal_rows_examples(rng):
    q = qr_orthonormal_rows([[2.0, 0, 0], [0, 3.0, 0]])
    assert np.allclose(np.abs(q), [[1.0, 0, 0], [0, 1.0, 0]], atol=1e-15)

    already = np.eye(3)[:2]
    assert np.allclose(np.abs(qr_orthonormal_rows(already)), already)

    q = qr_orthonormal_rows(rng.standard_normal((4, 16)))
    err = np.linalg.norm(q @ q.T - np.eye(4))
    assert err <= 1e-12


def test_qr_orthonormal_rows_preserves_row_space(rng):
    a = rng.standard_normal((3, 7))
    q = qr_orthonormal_rows(a)
    # projecting a onto span(q) leaves it unchanged
    assert np.linalg.norm(a - a @ q.T @ q) < 1e-12 * np.linalg.norm(a)


def test_qr_orthonormal_rows_rank_deficient():
    with pytest.raises(DegenerateInputError):
        qr_orthonormal_rows([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    with pytest.raises(ShapeError):
        qr_orthonormal_rows(np.ones((3, 2)))


def test_svd_diagonal_and_zero():
    dec = svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(dec.sigma, [3.0, 2.0, 1.0])
    # sign convention: largest entry of each right-singular vector is positive
    assert np.allclose(dec.vt, np.eye(3))

    dec = svd(np.zeros((2, 3)))
    assert np.all(dec.sigma == 0.0)


def test_svd_reconstructs_and_is_deterministic(rng):
    a = rng.standard_normal((5, 8))
    dec = svd(a)
    err = np.linalg.norm((dec.u * dec.sigma) @ dec.vt - a)
    assert err < 1e-12

    again = svd(a.copy())
    assert np.array_equal(dec.vt, again.vt)
    idx = np.argmax(np.abs(dec.vt), axis=1)
    assert np.all(dec.vt[np.arange(dec.vt.shape[0]), idx] > 0)


def test_svd_full_matrices(rng):
    dec = svd(rng.standard_normal((3, 6)), full_matrices=True)
    assert dec.vt.shape == (6, 6)
    assert np.linalg.norm(dec.vt @ dec.vt.T - np.eye(6)) < 1e-12


def test_sym_eig_examples():
    res = sym_eig(np.diag([1.0, 5.0]))
    assert np.allclose(res.values, [5.0, 1.0])
    assert np.allclose(np.abs(res.vectors), [[0.0, 1.0], [1.0, 0.0]])

    assert np.allclose(sym_eig(np.eye(3)).values, [1.0, 1.0, 1.0])


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(ContractError):
        sym_eig([[1.0, 2.0], [0.0, 1.0]])


def test_solve_examples(rng):
    b = rng.standard_normal((3, 2))
    assert np.allclose(solve(np.eye(3), b), b)
    x = solve([[2.0, 0.0], [0.0, 4.0]], [[2.0], [8.0]])
    assert np.allclose(x, [[1.0], [2.0]])


def test_solve_singular_and_shape():
    with pytest.raises(NumericalError):
        solve([[1.0, 2.0], [2.0, 4.0]], [[1.0], [1.0]])
    with pytest.raises(ShapeError):
        solve(np.eye(2), np.ones((3, 1)))


def test_skew_part_examples(rng):
    assert np.array_equal(skew_part([[0.0, 1.0], [0.0, 0.0]]), [[0.0, 0.5], [-0.5, 0.0]])
    s = rng.standard_normal((4, 4))
    assert np.all(skew_part(s + s.T) == 0.0)
    a = rng.standard_normal((5, 5))
    assert np.linalg.norm(skew_part(a) + (a + a.T) / 2.0 - a) < 1e-14
    with pytest.raises(ShapeError):
        skew_part(np.ones((2, 3)))


def test_numerical_rank():
    assert numerical_rank(np.zeros((3, 3))) == 0
    assert numerical_rank(np.outer([1.0, 2.0, 3.0], [1.0, 0.0, 1.0])) == 1
    assert numerical_rank(np.eye(4)) == 4


def test_principal_angles(rng):
    q = qr_orthonormal_rows(rng.standard_normal((3, 8)))
    mixed = random_orthogonal(3, rng) @ q
    assert np.max(principal_angles(q, mixed)) < 1e-7

    e = np.eye(4)
    angles = principal_angles(e[:1], e[1:2])
    assert abs(angles[0] - np.pi / 2) < 1e-12


def test_random_orthogonal(rng):
    q = random_orthogonal(6, rng)
    assert np.linalg.norm(q.T @ q - np.eye(6)) < 1e-12
