"""
linalg_service.py
Dense real linear algebra kernels shared by every other service.

A Matrix is a 2-D float64 numpy array. Every kernel validates its inputs with
as_matrix, so non-finite entries and wrong ranks are rejected at the boundary.
"""
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import scipy.linalg

from services.exceptions import ContractError, DegenerateInputError, NumericalError, ShapeError

Matrix = npt.NDArray[np.float64]

RANK_RTOL = 1e-12
PIVOT_RTOL = 1e-12
SYMMETRY_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class SvdResult:
    """Singular value decomposition a = u @ diag(sigma) @ vt, sigma descending."""
    u: Matrix
    sigma: npt.NDArray[np.float64]
    vt: Matrix


@dataclass(frozen=True, eq=False)
class SymEigResult:
    """Eigen-decomposition of a symmetric matrix, values descending, vectors as columns."""
    values: npt.NDArray[np.float64]
    vectors: Matrix


def as_matrix(a, name: str = "matrix") -> Matrix:
    """
    Coerce a to a finite 2-D float64 array.

    Raises:
        ShapeError: If a is not two dimensional
        ContractError: If a has NaN or Inf entries
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{name} has non-finite entries")
    return np.ascontiguousarray(m)


def _require_square(a: Matrix, name: str) -> None:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got {a.shape}")


def matmul(a, b) -> Matrix:
    """
    Matrix product a @ b.

    Raises:
        ShapeError: If a.cols != b.rows
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def qr_orthonormal_rows(a) -> Matrix:
    """
    Orthonormalize the rows of a (Gram-Schmidt order) via QR of a.T.

    The returned Q has Q @ Q.T = I and the same row space as a. Signs are fixed so that
    the triangular factor has a positive diagonal, which makes the result deterministic.

    Raises:
        ShapeError: If a has more rows than columns
        DegenerateInputError: If a is numerically rank deficient
    """
    a = as_matrix(a, "a")
    rows, cols = a.shape
    if rows > cols:
        raise ShapeError(f"cannot orthonormalize {rows} rows in dimension {cols}")
    if rows == 0:
        return np.zeros((0, cols))

    q, r = np.linalg.qr(a.T, mode="reduced")
    diag = np.abs(np.diag(r))
    if diag.max() == 0.0 or diag.min() < RANK_RTOL * diag.max():
        raise DegenerateInputError(
            f"rows are rank deficient (smallest pivot {diag.min():.3e}, largest {diag.max():.3e})"
        )
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray((q * signs).T)


def _sign_flips(rows: Matrix) -> npt.NDArray[np.float64]:
    # largest-magnitude entry of each row made positive; argmax breaks ties at the lowest index
    idx = np.argmax(np.abs(rows), axis=1)
    picked = rows[np.arange(rows.shape[0]), idx]
    return np.where(picked < 0, -1.0, 1.0)


def svd(a, full_matrices: bool = False) -> SvdResult:
    """
    Singular value decomposition with a deterministic sign convention.

    Each right-singular vector is flipped so that its largest-magnitude entry is positive
    (ties broken by lowest index); the paired left-singular vector is flipped with it.

    Args:
        a: Input matrix
        full_matrices: Return complete orthonormal bases for both sides

    Raises:
        NumericalError: If LAPACK fails to converge
    """
    a = as_matrix(a, "a")
    try:
        u, sigma, vt = np.linalg.svd(a, full_matrices=full_matrices)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"SVD did not converge: {e}") from e

    k = sigma.shape[0]
    flips = _sign_flips(vt)
    vt = vt * flips[:, None]
    u = u.copy()
    u[:, :k] *= flips[:k]
    return SvdResult(u=u, sigma=sigma, vt=vt)


def sym_eig(a) -> SymEigResult:
    """
    Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    Raises:
        ShapeError: If a is not square
        ContractError: If a is not symmetric within 1e-9 relative
        NumericalError: If LAPACK fails to converge
    """
    a = as_matrix(a, "a")
    _require_square(a, "a")
    norm = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > SYMMETRY_RTOL * norm:
        raise ContractError("sym_eig requires a symmetric matrix")
    try:
        values, vectors = np.linalg.eigh((a + a.T) / 2.0)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"eigendecomposition did not converge: {e}") from e

    values = values[::-1].copy()
    vectors = vectors[:, ::-1]
    vectors = vectors * _sign_flips(vectors.T)[None, :]
    return SymEigResult(values=values, vectors=np.ascontiguousarray(vectors))


def solve(a, b) -> Matrix:
    """
    Solve a @ x = b by LU with partial pivoting.

    Raises:
        ShapeError: If a is not square or b has the wrong number of rows
        NumericalError: If a pivot falls below 1e-12 * ||a||
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _require_square(a, "a")
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f"right-hand side has {b.shape[0]} rows, system has {a.shape[0]}")

    lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= PIVOT_RTOL * np.linalg.norm(a):
        raise NumericalError(f"singular system (smallest pivot {pivots.min():.3e})")
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


def skew_part(a) -> Matrix:
    """Skew-symmetric part (A - A^T) / 2 of a square matrix."""
    a = as_matrix(a, "a")
    _require_square(a, "a")
    return (a - a.T) / 2.0


def numerical_rank(a, rtol: float = 1e-8) -> int:
    """Number of singular values above rtol * sigma_max; 0 for the zero matrix."""
    sigma = np.linalg.svd(as_matrix(a, "a"), compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > rtol * sigma[0]))


def principal_angles(p, q) -> npt.NDArray[np.float64]:
    """
    Principal angles (radians, ascending) between the row spaces of two row-orthonormal matrices.
    """
    p = as_matrix(p, "p")
    q = as_matrix(q, "q")
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"row spaces live in different dimensions: {p.shape[1]} vs {q.shape[1]}")
    cosines = np.linalg.svd(p @ q.T, compute_uv=False)
    return np.arccos(np.clip(cosines, -1.0, 1.0))


def random_orthogonal(n: int, rng: np.random.Generator) -> Matrix:
    """Haar-distributed random orthogonal n x n matrix."""
    return qr_orthonormal_rows(rng.standard_normal((n, n)))
