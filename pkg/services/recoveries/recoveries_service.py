"""
recoveries_service.py
LOFT configurations that reproduce the core update of prior orthogonal adapters
(full OFT, block OFT, Givens, butterfly, Householder and principal-subspace variants),
plus direct reference constructions to check them against.
"""
import logging
import math
from typing import Literal, Optional

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field

from services.exceptions import ConfigError, EquivalenceError
from services.linalg.linalg_service import Matrix, as_matrix, svd
from services.loft.loft_service import LoftAdapter, LoftFactor, SupportBasis, merge
from services.orthogonal.orthogonal_service import SkewParam, TransformSpec, givens, householder_block, materialize
from services.support.support_service import butterfly_blocks

logger = logging.getLogger(__name__)

RecoveryMethod = Literal["full_oft", "block_oft", "goft", "boft", "hra", "psoft"]

EQUIVALENCE_RTOL = 1e-9

# parts of each method that lie outside the right-side subspace-rotation mechanism
EXCLUDED_EXTRAS: dict[str, list[str]] = {
    "full_oft": [],
    "block_oft": [],
    "goft": ["relaxed orthogonality (qGOFT)"],
    "boft": [],
    "hra": ["orthogonality regularizer lambda"],
    "psoft": ["magnitude scaling components", "orthogonality relaxation"],
}


class GivensRotation(BaseModel):
    """Counterclockwise rotation by theta_deg in the (i, j) coordinate plane (0-based)."""
    model_config = ConfigDict(extra="forbid")

    i: int = Field(ge=0)
    j: int = Field(ge=0)
    theta_deg: float


class RecoveryConfig(BaseModel):
    """Parameters of one recovered method."""
    model_config = ConfigDict(extra="forbid")

    method: RecoveryMethod
    block_size: int = Field(default=2, ge=1)
    stages: Optional[int] = Field(default=None, ge=1)
    givens: list[GivensRotation] = Field(default_factory=list)
    householder: Optional[list[list[float]]] = None
    n_reflections: int = Field(default=2, ge=1)
    rank: int = Field(default=2, ge=1)
    # None keeps every orthogonal block at the identity; otherwise blocks are seeded random rotations
    seed: Optional[int] = None
    skew_scale: float = Field(default=0.5, gt=0)


class RecoveryReport(BaseModel):
    """Residual of a recovered adapter against its direct reference construction."""
    method: str
    d_out: int
    d_in: int
    factors: int
    residual: float
    tolerance: float = EQUIVALENCE_RTOL
    fixed_point_residual: Optional[float] = None
    passed: bool
    excluded: list[str] = Field(default_factory=list)


def _rng(cfg: RecoveryConfig) -> Optional[np.random.Generator]:
    return np.random.default_rng(cfg.seed) if cfg.seed is not None else None


def _rotation(dim: int, rng: Optional[np.random.Generator], scale: float) -> TransformSpec:
    if rng is None:
        return TransformSpec.orthogonal(dim)
    return TransformSpec.orthogonal(dim, SkewParam.random(dim, rng, scale))


def _coordinate_support(indices, d: int, provenance: str) -> SupportBasis:
    p = np.zeros((len(indices), d))
    p[np.arange(len(indices)), list(indices)] = 1.0
    return SupportBasis(p=p, provenance=provenance)


def _householder_vectors(cfg: RecoveryConfig, d: int) -> list[np.ndarray]:
    if cfg.householder is not None:
        vectors = [np.asarray(u, dtype=np.float64) for u in cfg.householder]
    else:
        rng = np.random.default_rng(cfg.seed if cfg.seed is not None else 0)
        vectors = [rng.standard_normal(d) for _ in range(cfg.n_reflections)]
    out = []
    for i, u in enumerate(vectors):
        if u.shape != (d,):
            raise ConfigError(f"householder vector {i} has shape {u.shape}, expected ({d},)")
        norm = np.linalg.norm(u)
        if norm == 0.0:
            raise ConfigError(f"householder vector {i} is zero")
        out.append(u / norm)
    return out


def _boft_stages(cfg: RecoveryConfig, d: int) -> int:
    return cfg.stages if cfg.stages is not None else int(math.log2(d))


def _validate(cfg: RecoveryConfig, w0: Matrix) -> None:
    d_out, d = w0.shape
    b = cfg.block_size
    if cfg.method == "block_oft" and d % b:
        raise ConfigError(f"block_oft block size {b} does not divide d_in = {d}")
    if cfg.method == "boft":
        if d < 2 or d & (d - 1):
            raise ConfigError(f"boft requires a power-of-two d_in, got {d}")
        if b < 2 or b & (b - 1) or b > d:
            raise ConfigError(f"boft block size must be a power of two in [2, {d}], got {b}")
    if cfg.method == "goft":
        if not cfg.givens:
            raise ConfigError("goft requires at least one givens rotation")
        for rot in cfg.givens:
            if rot.i == rot.j or max(rot.i, rot.j) >= d:
                raise ConfigError(f"invalid givens plane ({rot.i}, {rot.j}) for d_in = {d}")
    if cfg.method == "psoft" and cfg.rank > min(d_out, d):
        raise ConfigError(f"psoft rank {cfg.rank} exceeds min(d_out, d_in) = {min(d_out, d)}")


def instantiate(cfg: RecoveryConfig, w0) -> LoftAdapter:
    """
    Build the LOFT adapter that recovers cfg.method on the base weight w0.

    Raises:
        ConfigError: If the parameters do not fit the weight dimensions
    """
    w0 = as_matrix(w0, "W0")
    _validate(cfg, w0)
    d = w0.shape[1]
    rng = _rng(cfg)
    factors: list[LoftFactor] = []

    if cfg.method == "full_oft":
        factors.append(LoftFactor(_coordinate_support(range(d), d, "coordinate"), _rotation(d, rng, cfg.skew_scale)))
    elif cfg.method == "block_oft":
        b = cfg.block_size
        for start in range(0, d, b):
            support = _coordinate_support(range(start, start + b), d, "coordinate")
            factors.append(LoftFactor(support, _rotation(b, rng, cfg.skew_scale)))
    elif cfg.method == "goft":
        for rot in cfg.givens:
            support = _coordinate_support((rot.i, rot.j), d, "coordinate")
            factors.append(LoftFactor(support, TransformSpec.fixed(givens(math.radians(rot.theta_deg)))))
    elif cfg.method == "boft":
        for stage in range(_boft_stages(cfg, d)):
            for block in butterfly_blocks(d, cfg.block_size, stage):
                support = _coordinate_support(block, d, "butterfly")
                factors.append(LoftFactor(support, _rotation(cfg.block_size, rng, cfg.skew_scale)))
    elif cfg.method == "hra":
        for u in _householder_vectors(cfg, d):
            support = SupportBasis(p=u[None, :], provenance="explicit")
            factors.append(LoftFactor(support, TransformSpec.fixed(householder_block())))
    else:
        vt = svd(w0, full_matrices=True).vt
        support = SupportBasis(p=vt[: cfg.rank], provenance="principal")
        factors.append(LoftFactor(support, _rotation(cfg.rank, rng, cfg.skew_scale)))

    logger.info(f"✓ Instantiated {cfg.method} with {len(factors)} factor(s).")
    return LoftAdapter(base_weight=w0, factors=tuple(factors))


def _embed(t: Matrix, indices, d: int) -> Matrix:
    full = np.eye(d)
    idx = np.asarray(list(indices))
    full[np.ix_(idx, idx)] = t
    return full


def _reference(cfg: RecoveryConfig, adapter: LoftAdapter) -> tuple[Matrix, Optional[float]]:
    """Reference merged weight built without the LOFT primitive."""
    w0 = np.array(adapter.base_weight)
    d = adapter.d_in
    blocks = [materialize(f.transform) for f in adapter.factors]

    if cfg.method == "full_oft":
        return w0 @ blocks[0], None
    if cfg.method == "block_oft":
        return w0 @ scipy.linalg.block_diag(*blocks), None
    if cfg.method == "goft":
        transform = np.eye(d)
        for rot in cfg.givens:
            transform = transform @ _embed(givens(math.radians(rot.theta_deg)), (rot.i, rot.j), d)
        return w0 @ transform, None
    if cfg.method == "boft":
        transform = np.eye(d)
        per_stage = d // cfg.block_size
        for stage in range(_boft_stages(cfg, d)):
            order = [i for block in butterfly_blocks(d, cfg.block_size, stage) for i in block]
            perm = np.eye(d)[order]
            stage_blocks = blocks[stage * per_stage:(stage + 1) * per_stage]
            transform = transform @ (perm.T @ scipy.linalg.block_diag(*stage_blocks) @ perm)
        return w0 @ transform, None
    if cfg.method == "hra":
        transform = np.eye(d)
        for u in _householder_vectors(cfg, d):
            transform = transform @ (np.eye(d) - 2.0 * np.outer(u, u))
        return w0 @ transform, None

    # psoft: U_perp S_perp V_perp^T + U_r S_r T_r V_r^T
    r = cfg.rank
    dec = svd(w0)
    u_r, s_r, vt_r = dec.u[:, :r], dec.sigma[:r], dec.vt[:r]
    head = (u_r * s_r) @ vt_r
    reference = (w0 - head) + (u_r * s_r) @ blocks[0] @ vt_r
    v_perp = svd(w0, full_matrices=True).vt[r:].T
    moved = merge(adapter) @ v_perp - w0 @ v_perp
    scale = max(np.linalg.norm(w0), np.finfo(float).tiny)
    return reference, float(np.linalg.norm(moved) / scale)


def verify_equivalence(cfg: RecoveryConfig, w0, strict: bool = False) -> RecoveryReport:
    """
    Compare merge(instantiate(cfg, w0)) with the method's direct construction.

    Args:
        cfg: Recovery configuration
        w0: Base weight
        strict: Raise EquivalenceError instead of returning a failing report

    Raises:
        ConfigError: If cfg does not fit w0
        EquivalenceError: If strict and the residual exceeds 1e-9 relative
    """
    adapter = instantiate(cfg, w0)
    reference, fixed_point = _reference(cfg, adapter)
    merged = merge(adapter)
    scale = max(np.linalg.norm(reference), np.finfo(float).tiny)
    residual = float(np.linalg.norm(merged - reference) / scale)
    passed = residual <= EQUIVALENCE_RTOL and (fixed_point is None or fixed_point <= 1e-10)

    report = RecoveryReport(
        method=cfg.method,
        d_out=adapter.d_out,
        d_in=adapter.d_in,
        factors=len(adapter.factors),
        residual=residual,
        fixed_point_residual=fixed_point,
        passed=passed,
        excluded=EXCLUDED_EXTRAS[cfg.method],
    )
    if passed:
        logger.info(f"✓ {cfg.method} matches its reference (residual {residual:.2e}).")
    else:
        logger.warning(f"{cfg.method} deviates from its reference (residual {residual:.2e}).")
        if strict:
            raise EquivalenceError(report)
    return report
