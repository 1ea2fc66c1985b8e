"""
support_service.py
Support construction and first-order support diagnostics.

The first-order loss change of any orthogonal right-subspace update at E = 0 is
<P F P^T, E> with F = skew(W0^T G). Everything here is built around that signal.
"""
import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from services.exceptions import ConfigError, MissingInputError, ShapeError
from services.linalg.linalg_service import Matrix, as_matrix, qr_orthonormal_rows, skew_part, svd
from services.loft.loft_service import SupportBasis
from services.orthogonal.orthogonal_service import SkewParam

logger = logging.getLogger(__name__)

__all__ = [
    "SkewSignal",
    "SupportRequest",
    "OptimalityReport",
    "SupportDiagnostics",
    "skew_part",
    "skew_signal",
    "signal_bound",
    "reduce_gradients",
    "butterfly_blocks",
    "make_support",
    "directional_derivative",
    "projected_gradient",
    "rho_score",
    "psoft_optimality_check",
    "support_diagnostics",
]

SupportMethod = Literal["principal", "gradsvd", "skewgrad", "random", "coordinate", "butterfly", "explicit"]
GRADIENT_METHODS = ("gradsvd", "skewgrad")
INVARIANCE_RTOL = 1e-8
RHO_TOL = 1e-8

GradientInput = Union[Matrix, Sequence[Matrix]]


@dataclass(frozen=True, eq=False)
class SkewSignal:
    """F = skew(W0^T G) and its skew-eigenvalue pair magnitudes mu, descending."""
    f: Matrix
    mu: npt.NDArray[np.float64]


class SupportRequest(BaseModel):
    """Where adaptation acts: the support method and its parameters."""
    model_config = ConfigDict(extra="forbid")

    method: SupportMethod
    r: int = Field(ge=1)
    seed: Optional[int] = None
    # coordinate: explicit coordinates, or the block_index-th block of r consecutive coordinates
    indices: Optional[list[int]] = None
    block_index: int = Field(default=0, ge=0)
    # butterfly: stage of the block pattern (block width = r)
    stage: int = Field(default=0, ge=0)
    # explicit: the r x d_in basis itself
    matrix: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _check_method_params(self):
        if self.method == "explicit" and self.matrix is None:
            raise ValueError("explicit supports require a matrix")
        if self.method == "coordinate" and self.indices is not None and len(self.indices) != self.r:
            raise ValueError(f"coordinate support lists {len(self.indices)} indices for r = {self.r}")
        if self.method == "butterfly" and (self.r < 2 or self.r & (self.r - 1)):
            raise ValueError("butterfly block width r must be a power of two >= 2")
        return self

    @property
    def label(self) -> str:
        return self.method


class OptimalityReport(BaseModel):
    """Whether the principal support is first-order optimal for a given (W0, G)."""
    r: int
    f_norm: float
    f_rperp_norm: float
    invariant: bool
    rho_principal: float
    attains_bound: bool


class SupportDiagnostics(BaseModel):
    """First-order diagnostics of one support against one calibration signal."""
    method: str
    r: int
    rho: Optional[float] = None
    bound: Optional[float] = None
    grad_norm_sq: Optional[float] = None
    f_rperp_norm: Optional[float] = None


def reduce_gradients(g: GradientInput) -> Matrix:
    """Sum a list of gradients (per batch or per layer) into one matrix."""
    if isinstance(g, np.ndarray):
        return as_matrix(g, "G")
    parts = [as_matrix(x, "G") for x in g]
    if not parts:
        raise MissingInputError("empty gradient list")
    total = np.zeros_like(parts[0])
    for part in parts:
        if part.shape != total.shape:
            raise ShapeError(f"gradient shapes differ: {part.shape} vs {total.shape}")
        total = total + part
    return total


def _check_pair(w0: Matrix, g: Matrix) -> None:
    if w0.shape != g.shape:
        raise ShapeError(f"W0 {w0.shape} and G {g.shape} must have the same shape")


def skew_signal(w0, g) -> SkewSignal:
    """
    F = skew(W0^T G) with pair magnitudes mu.

    The singular values of a real skew matrix come in equal pairs; mu lists each pair once.
    """
    w0 = as_matrix(w0, "W0")
    g = as_matrix(g, "G")
    _check_pair(w0, g)
    f = skew_part(w0.T @ g)
    sigma = np.linalg.svd(f, compute_uv=False)
    d = f.shape[0]
    mu = sigma[0:2 * (d // 2):2].copy()
    return SkewSignal(f=f, mu=mu)


def signal_bound(mu, r: int) -> float:
    """Largest achievable ||P F P^T||_F^2 over width-r supports: 2 * sum of the top floor(r/2) mu^2."""
    mu = np.asarray(mu, dtype=np.float64)
    return float(2.0 * np.sum(mu[: r // 2] ** 2))


def butterfly_blocks(d: int, block: int, stage: int) -> list[list[int]]:
    """
    Coordinate blocks of one butterfly stage.

    For d = 2^m and block = 2^k, a block collects the indices that agree on every bit outside
    the cyclic k-bit window starting at bit (stage mod m). With block = 2 this pairs indices
    differing in bit `stage`.

    Raises:
        ConfigError: If d or block is not a power of two, or block > d
    """
    if d < 2 or d & (d - 1):
        raise ConfigError(f"butterfly supports need a power-of-two dimension, got {d}")
    if block < 2 or block & (block - 1) or block > d:
        raise ConfigError(f"butterfly block width must be a power of two in [2, {d}], got {block}")
    m = d.bit_length() - 1
    k = block.bit_length() - 1
    window = [(stage + j) % m for j in range(k)]
    window_mask = sum(1 << b for b in window)

    blocks = []
    for base in range(d):
        if base & window_mask:
            continue
        members = []
        for local in range(block):
            idx = base
            for j, b in enumerate(window):
                if local >> j & 1:
                    idx |= 1 << b
            members.append(idx)
        blocks.append(members)
    return blocks


def _coordinate_rows(indices: Sequence[int], d: int) -> Matrix:
    if len(set(indices)) != len(indices):
        raise ConfigError(f"coordinate indices must be distinct: {list(indices)}")
    if any(i < 0 or i >= d for i in indices):
        raise ConfigError(f"coordinate indices out of range [0, {d}): {list(indices)}")
    p = np.zeros((len(indices), d))
    p[np.arange(len(indices)), list(indices)] = 1.0
    return p


def _extend_rows(rows: list, candidates, r: int) -> None:
    """Gram-Schmidt each candidate against rows, keeping it if enough survives."""
    for c in candidates:
        if len(rows) == r:
            return
        c = np.asarray(c, dtype=float)
        if rows:
            b = np.array(rows)
            c = c - b.T @ (b @ c)
        n = np.linalg.norm(c)
        if n > 1e-6:
            rows.append(c / n)


def _invariant_plane_rows(f: Matrix, r: int) -> Matrix:
    """Rows spanning floor(r/2) dominant invariant planes of the skew matrix f.

    Each plane is {v, f v} for the top right-singular vector v of f restricted
    to the complement of the planes already taken, so tied pair magnitudes
    never mix directions across planes. Odd r adds one complement direction.
    """
    d = f.shape[0]
    scale = max(float(np.linalg.norm(f)), np.finfo(float).tiny)
    rows: list = []
    proj = np.eye(d)
    for _ in range(r // 2):
        fc = proj @ f @ proj
        v = svd(fc, full_matrices=True).vt[0]
        fv = fc @ v
        if np.linalg.norm(fv) <= 1e-12 * scale:
            break
        _extend_rows(rows, (v, fv), r)
        b = np.array(rows)
        proj = np.eye(d) - b.T @ b
    # odd r or exhausted signal: fill from the complement
    _extend_rows(rows, svd(proj @ f @ proj, full_matrices=True).vt, r)
    _extend_rows(rows, np.eye(d), r)
    return qr_orthonormal_rows(np.array(rows))


def make_support(req: SupportRequest, w0=None, g: Optional[GradientInput] = None) -> SupportBasis:
    """
    Build a support basis.

    Args:
        req: Method and parameters
        w0: Base weight (d_out x d_in); required for principal, and for skewgrad
        g: Calibration gradient, or a list of them to be summed; required for gradsvd and skewgrad

    Returns:
        SupportBasis with provenance set to req.method

    Raises:
        MissingInputError: If a required weight or gradient is absent
        ConfigError: If r exceeds d_in or method parameters do not fit the dimension
    """
    method = req.method
    r = req.r
    if method in GRADIENT_METHODS and g is None:
        raise MissingInputError(f"support method '{method}' requires a calibration gradient")
    if method in ("principal", "skewgrad") and w0 is None:
        raise MissingInputError(f"support method '{method}' requires the base weight")

    w0 = as_matrix(w0, "W0") if w0 is not None else None
    g = reduce_gradients(g) if g is not None else None
    if w0 is not None:
        d = w0.shape[1]
    elif g is not None:
        d = g.shape[1]
    elif method == "explicit":
        d = len(req.matrix[0])
    else:
        raise MissingInputError(f"support method '{method}' needs W0 or G to fix the dimension")
    if r > d:
        raise ConfigError(f"support width r = {r} exceeds d_in = {d}")

    logger.info(f"Building support: {method} (r={r}, d={d})...")
    if method == "principal":
        p = svd(w0, full_matrices=True).vt[:r]
    elif method == "gradsvd":
        p = svd(g, full_matrices=True).vt[:r]
    elif method == "skewgrad":
        _check_pair(w0, g)
        f = skew_part(w0.T @ g)
        p = _invariant_plane_rows(f, r)
    elif method == "random":
        rng = np.random.default_rng(req.seed if req.seed is not None else 0)
        p = qr_orthonormal_rows(rng.standard_normal((r, d)))
    elif method == "coordinate":
        indices = req.indices if req.indices is not None else list(range(req.block_index * r, (req.block_index + 1) * r))
        p = _coordinate_rows(indices, d)
    elif method == "butterfly":
        blocks = butterfly_blocks(d, r, req.stage)
        if req.block_index >= len(blocks):
            raise ConfigError(f"butterfly stage has {len(blocks)} blocks, got block_index {req.block_index}")
        p = _coordinate_rows(blocks[req.block_index], d)
    else:
        p = as_matrix(req.matrix, "explicit support")
        if p.shape != (r, d):
            raise ShapeError(f"explicit support must be {r}x{d}, got {p.shape}")

    support = SupportBasis(p=p, provenance=method)
    logger.info("✓ Support built.")
    return support


def _check_support(p: SupportBasis, w0: Matrix) -> None:
    if p.d != w0.shape[1]:
        raise ShapeError(f"support acts on dimension {p.d}, W0 has d_in = {w0.shape[1]}")


def projected_gradient(w0, g, p: SupportBasis) -> Matrix:
    """Gradient of the loss with respect to E at E = 0: P skew(W0^T G) P^T."""
    w0 = as_matrix(w0, "W0")
    g = as_matrix(g, "G")
    _check_pair(w0, g)
    _check_support(p, w0)
    f = skew_part(w0.T @ g)
    return p.p @ f @ p.p.T


def directional_derivative(w0, g, p: SupportBasis, e: SkewParam) -> float:
    """First-order loss change along E at initialization: <P F P^T, E>."""
    grad = projected_gradient(w0, g, p)
    if e.dim != p.r:
        raise ShapeError(f"E has dim {e.dim}, support has width {p.r}")
    return float(np.sum(grad * e.matrix))


def _as_layers(x) -> list:
    if isinstance(x, (list, tuple)):
        return list(x)
    return [x]


def rho_score(w0, g, p) -> float:
    """
    Relative signal capture: sum_l ||P_l F_l P_l^T||^2 / sum_l 2 sum_{k <= r/2} mu_{l,k}^2.

    Accepts a single layer or matching lists of layers. When no layer carries any signal,
    every support is vacuously optimal and rho is 1.

    Raises:
        ShapeError: If the layer lists differ in length or shapes are inconsistent
        ConfigError: If supports do not share a single width r
    """
    w0s, gs, ps = _as_layers(w0), _as_layers(g), _as_layers(p)
    if not (len(w0s) == len(gs) == len(ps)) or not w0s:
        raise ShapeError(f"layer lists differ in length: {len(w0s)}, {len(gs)}, {len(ps)}")
    widths = {support.r for support in ps}
    if len(widths) != 1:
        raise ConfigError(f"rho requires a uniform support width, got {sorted(widths)}")
    r = widths.pop()

    captured = 0.0
    best = 0.0
    for layer_w0, layer_g, support in zip(w0s, gs, ps):
        signal = skew_signal(layer_w0, layer_g)
        _check_support(support, as_matrix(layer_w0, "W0"))
        pf = support.p @ signal.f @ support.p.T
        captured += float(np.sum(pf * pf))
        best += signal_bound(signal.mu, r)
    if best == 0.0:
        return 1.0
    return captured / best


def psoft_optimality_check(w0, g, r: int) -> OptimalityReport:
    """
    Test the necessary condition F_{r,perp} = 0 for the principal support to be optimal.

    F is rotated into the right-singular basis of W0, V^T F V, and its off-diagonal block
    between the top-r and residual directions is measured.

    Raises:
        ConfigError: If r >= d_in
    """
    w0 = as_matrix(w0, "W0")
    g = as_matrix(g, "G")
    _check_pair(w0, g)
    d = w0.shape[1]
    if not 1 <= r < d:
        raise ConfigError(f"optimality check needs 1 <= r < d_in = {d}, got {r}")

    signal = skew_signal(w0, g)
    vt = svd(w0, full_matrices=True).vt
    rotated = vt @ signal.f @ vt.T
    f_norm = float(np.linalg.norm(signal.f))
    f_rperp = float(np.linalg.norm(rotated[:r, r:]))

    principal = SupportBasis(p=vt[:r], provenance="principal")
    rho = rho_score(w0, g, principal)
    return OptimalityReport(
        r=r,
        f_norm=f_norm,
        f_rperp_norm=f_rperp,
        invariant=f_rperp <= INVARIANCE_RTOL * f_norm,
        rho_principal=rho,
        attains_bound=abs(rho - 1.0) <= RHO_TOL,
    )


def support_diagnostics(w0, g, p: SupportBasis) -> SupportDiagnostics:
    """rho, bound, captured energy and leakage ||(I - P^T P) F P^T||_F of one support."""
    if g is None or w0 is None:
        return SupportDiagnostics(method=p.provenance, r=p.r)
    w0 = as_matrix(w0, "W0")
    g = reduce_gradients(g)
    signal = skew_signal(w0, g)
    _check_support(p, w0)
    fp = signal.f @ p.p.T
    pf = p.p @ fp
    leak = fp - p.p.T @ pf
    return SupportDiagnostics(
        method=p.provenance,
        r=p.r,
        rho=rho_score(w0, g, p),
        bound=signal_bound(signal.mu, p.r),
        grad_norm_sq=float(np.sum(pf * pf)),
        f_rperp_norm=float(np.linalg.norm(leak)),
    )
