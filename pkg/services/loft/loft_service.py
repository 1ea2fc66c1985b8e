"""
loft_service.py
The right-multiplicative update W+ = W0 * prod_l (I + P_l^T (T_l - I) P_l).

Supports P are row-orthonormal r x d_in bases; transforms T act inside them. Every
forward path uses the r-width implicit form and never builds a d x d matrix.
"""
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from services.exceptions import ConfigError, ContractError, ShapeError
from services.linalg.linalg_service import Matrix, as_matrix
from services.orthogonal.orthogonal_service import TransformSpec, materialize

Provenance = Literal["principal", "gradsvd", "skewgrad", "random", "coordinate", "butterfly", "explicit"]

ORTHONORMAL_TOL = 1e-10
ORTHOGONAL_FIXED_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SupportBasis:
    """
    Row-orthonormal r x d basis P of the subspace the update acts on.

    validate=False skips the P P^T = I check; it exists for negative-control suites only.
    """
    p: Matrix
    provenance: Provenance = "explicit"
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        p = as_matrix(self.p, "P").copy()
        r, d = p.shape
        if r == 0:
            raise ConfigError("support width r must be at least 1")
        if r > d:
            raise ShapeError(f"support width {r} exceeds dimension {d}")
        if self.validate:
            deviation = np.linalg.norm(p @ p.T - np.eye(r))
            if deviation > ORTHONORMAL_TOL:
                raise ContractError(f"support rows are not orthonormal (||PP^T - I||_F = {deviation:.3e})")
        p.flags.writeable = False
        object.__setattr__(self, "p", p)

    @property
    def r(self) -> int:
        return self.p.shape[0]

    @property
    def d(self) -> int:
        return self.p.shape[1]

    def projector(self) -> Matrix:
        """Orthogonal projector P^T P onto the support."""
        return self.p.T @ self.p


@dataclass(frozen=True, eq=False)
class LoftFactor:
    """One factor S(P, T)."""
    support: SupportBasis
    transform: TransformSpec

    def __post_init__(self):
        if self.support.r != self.transform.dim:
            raise ShapeError(f"support width {self.support.r} does not match transform dim {self.transform.dim}")

    def with_transform(self, transform: TransformSpec) -> "LoftFactor":
        return LoftFactor(support=self.support, transform=transform)


@dataclass(frozen=True, eq=False)
class LoftAdapter:
    """A frozen base weight W0 (d_out x d_in) and an ordered list of factors."""
    base_weight: Matrix
    factors: tuple[LoftFactor, ...] = ()

    def __post_init__(self):
        w0 = as_matrix(self.base_weight, "W0").copy()
        w0.flags.writeable = False
        object.__setattr__(self, "base_weight", w0)
        factors = tuple(self.factors)
        for i, f in enumerate(factors):
            if f.support.d != w0.shape[1]:
                raise ShapeError(f"factor {i} acts on dimension {f.support.d}, W0 has d_in = {w0.shape[1]}")
        object.__setattr__(self, "factors", factors)

    @property
    def d_in(self) -> int:
        return self.base_weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.base_weight.shape[0]

    def with_factors(self, factors) -> "LoftAdapter":
        return LoftAdapter(base_weight=self.base_weight, factors=tuple(factors))


def _shift(f: LoftFactor) -> Matrix:
    return materialize(f.transform) - np.eye(f.support.r)


def build_s(f: LoftFactor) -> Matrix:
    """Materialize S = I + P^T (T - I) P as a d x d matrix."""
    p = f.support.p
    return np.eye(f.support.d) + p.T @ _shift(f) @ p


def right_apply(w: Matrix, f: LoftFactor) -> Matrix:
    """w @ S(P, T) via w + (w P^T)(T - I) P."""
    p = f.support.p
    return w + (w @ p.T) @ _shift(f) @ p


def right_apply_transpose(w: Matrix, f: LoftFactor) -> Matrix:
    """w @ S(P, T)^T via w + (w P^T)(T - I)^T P."""
    p = f.support.p
    return w + (w @ p.T) @ _shift(f).T @ p


def apply_adapter(a: LoftAdapter, x) -> Matrix:
    """
    W0 @ S_1 @ ... @ S_L @ x for a batch x whose columns are samples.

    Raises:
        ShapeError: If x does not have d_in rows
    """
    x = as_matrix(x, "x")
    if x.shape[0] != a.d_in:
        raise ShapeError(f"x has {x.shape[0]} rows, adapter expects d_in = {a.d_in}")
    out = x
    for f in reversed(a.factors):
        p = f.support.p
        out = out + p.T @ (_shift(f) @ (p @ out))
    return a.base_weight @ out


def merge(a: LoftAdapter) -> Matrix:
    """Merged weight W+ = W0 @ prod_l S_l, factors applied in stored order."""
    w = np.array(a.base_weight)
    for f in a.factors:
        w = right_apply(w, f)
    return w


def delta(a: LoftAdapter) -> Matrix:
    """Induced additive update W+ - W0 (rank at most the total support width)."""
    if len(a.factors) == 1:
        f = a.factors[0]
        p = f.support.p
        return (a.base_weight @ p.T) @ _shift(f) @ p
    return merge(a) - a.base_weight


def row_gram(w) -> Matrix:
    """Row Gram matrix W W^T."""
    w = as_matrix(w, "W")
    return w @ w.T


def is_orthogonal(a: LoftAdapter) -> bool:
    """True when every factor transform is orthogonal (Cayley or an orthogonal fixed block)."""
    for f in a.factors:
        if f.transform.kind == "free":
            return False
        if f.transform.kind == "fixed":
            t = f.transform.dense
            if np.linalg.norm(t.T @ t - np.eye(t.shape[0])) > ORTHOGONAL_FIXED_TOL:
                return False
    return True


@dataclass(frozen=True)
class GeometryResiduals:
    """Relative deviations of W+ from W0 under the geometry-preservation invariants."""
    gram: float
    singular_values: float
    frobenius: float
    spectral: float
    rank_preserved: bool

    def max_residual(self) -> float:
        return max(self.gram, self.singular_values, self.frobenius, self.spectral)


def geometry_residuals(w0, w_plus, rank_rtol: float = 1e-8) -> GeometryResiduals:
    """
    Compare a merged weight against its base under right-orthogonal updates.

    Singular values are compared elementwise relative to the largest one.
    """
    w0 = as_matrix(w0, "W0")
    w_plus = as_matrix(w_plus, "W+")
    if w0.shape != w_plus.shape:
        raise ShapeError(f"shape mismatch {w0.shape} vs {w_plus.shape}")

    g0 = row_gram(w0)
    g0_norm = max(np.linalg.norm(g0), np.finfo(float).tiny)
    gram = np.linalg.norm(row_gram(w_plus) - g0) / g0_norm

    s0 = np.linalg.svd(w0, compute_uv=False)
    s1 = np.linalg.svd(w_plus, compute_uv=False)
    scale = max(s0[0], np.finfo(float).tiny) if s0.size else 1.0
    sv = float(np.max(np.abs(s1 - s0)) / scale) if s0.size else 0.0

    f0 = max(np.linalg.norm(w0), np.finfo(float).tiny)
    frob = abs(np.linalg.norm(w_plus) - np.linalg.norm(w0)) / f0
    spec = abs(s1[0] - s0[0]) / scale if s0.size else 0.0

    rank0 = int(np.sum(s0 > rank_rtol * scale)) if s0.size and s0[0] > 0 else 0
    rank1 = int(np.sum(s1 > rank_rtol * scale)) if s1.size and s1[0] > 0 else 0
    return GeometryResiduals(
        gram=float(gram),
        singular_values=sv,
        frobenius=float(frob),
        spectral=float(spec),
        rank_preserved=rank0 == rank1,
    )


def single_factor_adapter(w0, support: SupportBasis, transform: Optional[TransformSpec] = None) -> LoftAdapter:
    """Adapter with one factor; orthogonal identity-initialized transform by default."""
    transform = transform if transform is not None else TransformSpec.orthogonal(support.r)
    return LoftAdapter(base_weight=w0, factors=(LoftFactor(support=support, transform=transform),))
