"""
orthogonal_service.py
In-subspace transforms: skew parameters, the Cayley map and its adjoint.

Convention: Q(E) = (I - E/2)^-1 (I + E/2), so that dQ(tE)/dt at t = 0 is exactly E.
"""
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import numpy.typing as npt

from services.exceptions import ConfigError, ContractError, ShapeError
from services.linalg.linalg_service import Matrix, as_matrix, skew_part, solve

TransformKind = Literal["orthogonal", "free", "fixed"]

SKEW_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class SkewParam:
    """
    Skew-symmetric r x r parameter E, stored as its strictly-lower triangle.

    The full matrix is materialized on demand, so E^T = -E holds by construction.
    """
    dim: int
    lower: npt.NDArray[np.float64]

    def __post_init__(self):
        expected = self.dim * (self.dim - 1) // 2
        lower = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        if lower.shape[0] != expected:
            raise ShapeError(f"skew parameter of dim {self.dim} needs {expected} entries, got {lower.shape[0]}")
        if not np.all(np.isfinite(lower)):
            raise ContractError("skew parameter has non-finite entries")
        lower = lower.copy()
        lower.flags.writeable = False
        object.__setattr__(self, "lower", lower)

    @classmethod
    def zeros(cls, dim: int) -> "SkewParam":
        return cls(dim=dim, lower=np.zeros(dim * (dim - 1) // 2))

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, scale: float = 1.0) -> "SkewParam":
        return cls(dim=dim, lower=scale * rng.standard_normal(dim * (dim - 1) // 2))

    @classmethod
    def from_matrix(cls, m) -> "SkewParam":
        """
        Build from a full skew-symmetric matrix.

        Raises:
            ContractError: If m is not skew-symmetric within 1e-10 relative
        """
        m = as_matrix(m, "E")
        if m.shape[0] != m.shape[1]:
            raise ShapeError(f"E must be square, got {m.shape}")
        scale = max(np.linalg.norm(m), 1.0)
        if np.linalg.norm(m + m.T) > SKEW_RTOL * scale:
            raise ContractError("E must be skew-symmetric")
        rows, cols = np.tril_indices(m.shape[0], k=-1)
        return cls(dim=m.shape[0], lower=m[rows, cols])

    @property
    def matrix(self) -> Matrix:
        e = np.zeros((self.dim, self.dim))
        rows, cols = np.tril_indices(self.dim, k=-1)
        e[rows, cols] = self.lower
        return e - e.T


@dataclass(frozen=True, eq=False)
class TransformSpec:
    """
    The r x r transform acting inside a support.

    orthogonal: Cayley image of a SkewParam
    free: dense matrix, identity-initialized, unconstrained
    fixed: constant matrix (e.g. the [[-1]] Householder block or a Givens rotation)
    """
    kind: TransformKind
    skew: Optional[SkewParam] = None
    dense: Optional[Matrix] = field(default=None)

    def __post_init__(self):
        if self.kind == "orthogonal":
            if self.skew is None or self.dense is not None:
                raise ConfigError("orthogonal transforms carry exactly a skew parameter")
        elif self.kind in ("free", "fixed"):
            if self.dense is None or self.skew is not None:
                raise ConfigError(f"{self.kind} transforms carry exactly a dense matrix")
            dense = as_matrix(self.dense, "T").copy()
            if dense.shape[0] != dense.shape[1]:
                raise ShapeError(f"T must be square, got {dense.shape}")
            dense.flags.writeable = False
            object.__setattr__(self, "dense", dense)
        else:
            raise ConfigError(f"unknown transform kind '{self.kind}'")

    @classmethod
    def orthogonal(cls, dim: int, skew: Optional[SkewParam] = None) -> "TransformSpec":
        skew = skew if skew is not None else SkewParam.zeros(dim)
        if skew.dim != dim:
            raise ShapeError(f"skew parameter has dim {skew.dim}, expected {dim}")
        return cls(kind="orthogonal", skew=skew)

    @classmethod
    def free(cls, dim: int) -> "TransformSpec":
        return cls(kind="free", dense=np.eye(dim))

    @classmethod
    def fixed(cls, m) -> "TransformSpec":
        return cls(kind="fixed", dense=m)

    @property
    def dim(self) -> int:
        return self.skew.dim if self.kind == "orthogonal" else self.dense.shape[0]

    @property
    def trainable(self) -> bool:
        return self.kind != "fixed"

    def parameter(self) -> Matrix:
        """Trainable parameter as a matrix: E for orthogonal, T for free."""
        if self.kind == "orthogonal":
            return self.skew.matrix
        if self.kind == "free":
            return np.array(self.dense)
        raise ConfigError("fixed transforms have no trainable parameter")

    def with_parameter(self, m) -> "TransformSpec":
        """Copy with a new trainable parameter; fixed transforms are immutable."""
        if self.kind == "orthogonal":
            return TransformSpec(kind="orthogonal", skew=SkewParam.from_matrix(skew_part(m)))
        if self.kind == "free":
            return TransformSpec(kind="free", dense=m)
        raise ConfigError("fixed transforms are immutable")


def cayley(e: SkewParam) -> Matrix:
    """
    Q(E) = (I - E/2)^-1 (I + E/2).

    Raises:
        NumericalError: If I - E/2 is numerically singular
    """
    half = e.matrix / 2.0
    eye = np.eye(e.dim)
    return solve(eye - half, eye + half)


def cayley_derivative_check(e: SkewParam, t_step: float) -> float:
    """
    Residual ||(Q(tE) - I)/t - E||_F of the first-order expansion of the Cayley map.

    Raises:
        ConfigError: If t_step is outside (0, 0.1]
    """
    if not 0.0 < t_step <= 0.1:
        raise ConfigError(f"t_step must lie in (0, 0.1], got {t_step}")
    scaled = SkewParam(dim=e.dim, lower=t_step * e.lower)
    q = cayley(scaled)
    return float(np.linalg.norm((q - np.eye(e.dim)) / t_step - e.matrix))


def cayley_adjoint(e: SkewParam, grad_q) -> Matrix:
    """
    Pull a gradient with respect to Q back to the skew parameter E.

    With A = I - E/2: dL/dE = skew((1/2)(I + Q)^T grad_q A^-T). Since I + Q = 2 A^-1 this
    equals skew(A^-T grad_q A^-T), which is what is evaluated here.

    Raises:
        ShapeError: If grad_q is not r x r
        NumericalError: If A is numerically singular
    """
    grad_q = as_matrix(grad_q, "grad_q")
    if grad_q.shape != (e.dim, e.dim):
        raise ShapeError(f"grad_q must be {e.dim}x{e.dim}, got {grad_q.shape}")
    a = np.eye(e.dim) - e.matrix / 2.0
    left = solve(a.T, grad_q)
    full = solve(a, left.T).T
    return skew_part(full)


def materialize(t: TransformSpec) -> Matrix:
    """The r x r transform matrix T."""
    if t.kind == "orthogonal":
        return cayley(t.skew)
    return np.array(t.dense)


def givens(theta: float) -> Matrix:
    """Counterclockwise plane rotation by theta radians."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def householder_block() -> Matrix:
    """The fixed width-one reflection block [[-1]]."""
    return np.array([[-1.0]])
