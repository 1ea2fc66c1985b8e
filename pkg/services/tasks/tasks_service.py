"""
tasks_service.py
Synthetic planted-rotation regression tasks, the quadratic loss and calibration gradients.

Loss: L(W) = ||W X - Y||_F^2 / (2n), columns of X are samples.
"""
import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services.exceptions import ConfigError, ShapeError
from services.linalg.linalg_service import Matrix, as_matrix, qr_orthonormal_rows, random_orthogonal
from services.loft.loft_service import SupportBasis, merge, single_factor_adapter
from services.orthogonal.orthogonal_service import SkewParam, TransformSpec

logger = logging.getLogger(__name__)

WeightMode = Literal["random", "identity", "orthogonal"]
DEFAULT_CALIBRATION_BATCHES = 4


@dataclass(frozen=True, eq=False)
class PlantedRotation:
    """The hidden factor S(P*, Q(E*)) that maps W0 to the target weight."""
    p_star: SupportBasis
    e_star: SkewParam


@dataclass(frozen=True, eq=False)
class LinearTask:
    """
    Regression task: inputs x (d_in x n), targets y (d_out x n), base weight w0.

    heldout lists the column indices of the fixed held-out split; the remaining
    columns form the training split.
    """
    x: Matrix
    y: Matrix
    w0: Matrix
    planted: Optional[PlantedRotation] = None
    heldout: tuple[int, ...] = ()
    seed: Optional[int] = None
    noise: float = 0.0

    def __post_init__(self):
        x = as_matrix(self.x, "X")
        y = as_matrix(self.y, "Y")
        w0 = as_matrix(self.w0, "W0")
        if x.shape[1] < 1:
            raise ConfigError("a task needs at least one sample")
        if y.shape[1] != x.shape[1]:
            raise ShapeError(f"X has {x.shape[1]} samples, Y has {y.shape[1]}")
        if w0.shape != (y.shape[0], x.shape[0]):
            raise ShapeError(f"W0 must be {y.shape[0]}x{x.shape[0]}, got {w0.shape}")
        heldout = tuple(sorted(int(i) for i in self.heldout))
        if heldout and (heldout[0] < 0 or heldout[-1] >= x.shape[1]):
            raise ConfigError("held-out indices out of range")
        for name, m in (("x", x), ("y", y), ("w0", w0)):
            m.flags.writeable = False
            object.__setattr__(self, name, m)
        object.__setattr__(self, "heldout", heldout)

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def d_in(self) -> int:
        return self.x.shape[0]

    @property
    def d_out(self) -> int:
        return self.y.shape[0]

    def train_indices(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[list(self.heldout)] = False
        return np.flatnonzero(mask)

    def columns(self, idx) -> "LinearTask":
        """Sub-task on the given columns; the held-out split is dropped."""
        idx = np.asarray(idx, dtype=int)
        return LinearTask(x=self.x[:, idx], y=self.y[:, idx], w0=self.w0, planted=self.planted,
                          seed=self.seed, noise=self.noise)


class TaskConfig(BaseModel):
    """Planted-rotation task parameters."""
    model_config = ConfigDict(extra="forbid")

    d_in: int = Field(ge=1)
    d_out: int = Field(ge=1)
    n: int = Field(ge=1)
    r_star: int = Field(ge=1)
    seed: int = 0
    noise: float = Field(default=0.0, ge=0.0)
    weight_mode: WeightMode = "orthogonal"
    whiten: bool = True
    holdout_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    e_scale: float = Field(default=0.5, gt=0.0)


class CalibrationConfig(BaseModel):
    """Mini-batch schedule of the calibration gradient."""
    model_config = ConfigDict(extra="forbid")

    k_batches: int = Field(default=DEFAULT_CALIBRATION_BATCHES, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    seed: int = 0


def _whitened_block(d: int, m: int, rng: np.random.Generator) -> Matrix:
    # m columns with (block)(block)^T / m = I
    return np.sqrt(m) * qr_orthonormal_rows(rng.standard_normal((d, m)))


def _base_weight(d_in: int, d_out: int, mode: WeightMode, rng: np.random.Generator) -> Matrix:
    if mode == "identity":
        if d_in != d_out:
            raise ConfigError(f"identity W0 needs d_in == d_out, got {d_in} and {d_out}")
        return np.eye(d_in)
    if mode == "orthogonal":
        if d_in == d_out:
            return random_orthogonal(d_in, rng)
        if d_out < d_in:
            return qr_orthonormal_rows(rng.standard_normal((d_out, d_in)))
        return qr_orthonormal_rows(rng.standard_normal((d_in, d_out))).T.copy()
    return rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)


def make_planted_task(d_in: int, d_out: int, n: int, r_star: int, seed: int, noise: float = 0.0,
                      weight_mode: WeightMode = "orthogonal", whiten: bool = True,
                      holdout_fraction: float = 0.2, e_scale: float = 0.5) -> LinearTask:
    """
    Draw a task whose target weight is W0 rotated by a hidden LOFT factor.

    In whitened mode X X^T / n = I. When both splits have at least d_in columns each
    is whitened on its own, so the training split alone is whitened too; otherwise
    only the full X is.

    Raises:
        ConfigError: If r_star > d_in or n < d_in with whitened inputs
    """
    if not 1 <= r_star <= d_in:
        raise ConfigError(f"r_star must lie in [1, d_in = {d_in}], got {r_star}")
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = np.random.default_rng(seed)

    w0 = _base_weight(d_in, d_out, weight_mode, rng)
    p_star = SupportBasis(p=qr_orthonormal_rows(rng.standard_normal((r_star, d_in))), provenance="random")
    e_star = SkewParam.random(r_star, rng, e_scale)
    w_star = merge(single_factor_adapter(w0, p_star, TransformSpec.orthogonal(r_star, e_star)))

    n_heldout = int(round(holdout_fraction * n))
    order = rng.permutation(n)
    heldout = np.sort(order[:n_heldout])
    train = np.sort(order[n_heldout:])
    if train.size == 0:
        raise ConfigError("holdout_fraction leaves no training columns")

    if whiten and n < d_in:
        raise ConfigError(f"whitened inputs need n >= d_in = {d_in}, got n = {n}")
    per_split = all(block.size == 0 or block.size >= d_in for block in (train, heldout))

    if whiten and not per_split:
        logger.debug(f"Split too small to whiten on its own (d_in={d_in}); whitening X as a whole")
        x = _whitened_block(d_in, n, rng)
    else:
        x = np.zeros((d_in, n))
        for block in (train, heldout):
            if block.size == 0:
                continue
            if whiten:
                x[:, block] = _whitened_block(d_in, block.size, rng)
            else:
                x[:, block] = rng.standard_normal((d_in, block.size))

    y = w_star @ x
    if noise > 0.0:
        y = y + noise * rng.standard_normal(y.shape)

    logger.info(f"✓ Planted task drawn (d_in={d_in}, d_out={d_out}, n={n}, r*={r_star}, seed={seed}).")
    return LinearTask(x=x, y=y, w0=w0, planted=PlantedRotation(p_star=p_star, e_star=e_star),
                      heldout=tuple(int(i) for i in heldout), seed=seed, noise=noise)


def build_task(cfg: TaskConfig, seed: Optional[int] = None) -> LinearTask:
    """make_planted_task from a TaskConfig, optionally overriding its seed."""
    return make_planted_task(
        d_in=cfg.d_in, d_out=cfg.d_out, n=cfg.n, r_star=cfg.r_star,
        seed=cfg.seed if seed is None else seed, noise=cfg.noise, weight_mode=cfg.weight_mode,
        whiten=cfg.whiten, holdout_fraction=cfg.holdout_fraction, e_scale=cfg.e_scale,
    )


def split_task(task: LinearTask) -> tuple[LinearTask, LinearTask]:
    """
    Training and held-out sub-tasks.

    Raises:
        ConfigError: If the task has no held-out split
    """
    if not task.heldout:
        raise ConfigError("task has no held-out split")
    return task.columns(task.train_indices()), task.columns(list(task.heldout))


def training_part(task: LinearTask) -> LinearTask:
    """Training columns only (the whole task when it has no held-out split)."""
    return task.columns(task.train_indices()) if task.heldout else task


def task_loss(task: LinearTask, w) -> float:
    residual = as_matrix(w, "W") @ task.x - task.y
    return float(np.sum(residual * residual) / (2.0 * task.n))


def loss_and_grad(task: LinearTask, w) -> tuple[float, Matrix]:
    """
    Loss ||W X - Y||^2 / (2n) and its gradient (W X - Y) X^T / n.

    Raises:
        ShapeError: If w does not have the shape of W0
    """
    w = as_matrix(w, "W")
    if w.shape != task.w0.shape:
        raise ShapeError(f"W must be {task.w0.shape}, got {w.shape}")
    residual = w @ task.x - task.y
    loss = float(np.sum(residual * residual) / (2.0 * task.n))
    return loss, residual @ task.x.T / task.n


def subsample(task: LinearTask, fraction: float, seed: int) -> LinearTask:
    """
    Keep a seeded fraction of the training columns; the held-out split is unchanged.

    fraction = 1 returns the task itself.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"data fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return task
    train = task.train_indices()
    keep = max(1, int(round(fraction * train.size)))
    chosen = np.sort(np.random.default_rng(seed).permutation(train)[:keep])
    idx = np.concatenate([chosen, np.asarray(task.heldout, dtype=int)])
    heldout_positions = tuple(range(keep, keep + len(task.heldout)))
    return LinearTask(x=task.x[:, idx], y=task.y[:, idx], w0=task.w0, planted=task.planted,
                      heldout=heldout_positions, seed=task.seed, noise=task.noise)


def calibrate(task: LinearTask, k_batches: int = DEFAULT_CALIBRATION_BATCHES,
              batch_size: Optional[int] = None, seed: int = 0) -> Matrix:
    """
    Accumulated calibration gradient at W0 over k seeded mini-batches of the training split.

    Each batch contributes its batch-mean gradient; the k contributions are summed, so a
    single full batch reproduces the full-batch gradient and k full batches give k times it.

    Raises:
        ConfigError: If k_batches < 1 or batch_size is outside [1, n_train]
    """
    if k_batches < 1:
        raise ConfigError(f"k_batches must be at least 1, got {k_batches}")
    train = training_part(task)
    n = train.n
    batch_size = n if batch_size is None else batch_size
    if not 1 <= batch_size <= n:
        raise ConfigError(f"batch_size must lie in [1, {n}], got {batch_size}")

    rng = np.random.default_rng(seed)
    total = np.zeros_like(task.w0)
    for _ in range(k_batches):
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        _, g = loss_and_grad(train.columns(idx), task.w0)
        total = total + g
    logger.info(f"✓ Calibration gradient accumulated over {k_batches} batch(es) of {batch_size}.")
    return total
