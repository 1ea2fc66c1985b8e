"""
training_service.py
Adapter-only optimization on linear tasks: chain-rule gradients through the LOFT
factors and the Cayley map, the controlled probe, full training with dynamics logging
and the early-validation diagnostic.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services.exceptions import ConfigError, ContractError
from services.linalg.linalg_service import Matrix
from services.loft.loft_service import (
    LoftAdapter,
    SupportBasis,
    geometry_residuals,
    is_orthogonal,
    merge,
    right_apply,
    right_apply_transpose,
    single_factor_adapter,
)
from services.orthogonal.orthogonal_service import cayley_adjoint
from services.support.support_service import rho_score
from services.tasks.tasks_service import LinearTask, loss_and_grad, split_task, task_loss, training_part

logger = logging.getLogger(__name__)

OptimizerName = Literal["sgd", "sgd_momentum", "adam_like"]

EARLY_VALIDATION_STEPS = 25


class TrainConfig(BaseModel):
    """Optimizer and schedule for probe and training runs."""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.1, ge=0.0)
    steps: int = Field(default=100, ge=0)
    optimizer: OptimizerName = "sgd"
    batch_size: Optional[int] = Field(default=None, ge=1)
    seed: int = 0
    eval_every: int = Field(default=10, ge=1)
    checkpoints: list[int] = Field(default_factory=lambda: [1, 5, 10, 20])
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    divergence_factor: float = Field(default=1e6, gt=1.0)


class ProbeReport(BaseModel):
    """Held-out loss trajectory of an adapter-only probe run."""
    method: str
    r: int
    seed: int
    rho: float
    losses: list[float]
    delta_loss: dict[int, float]
    diverged: bool = False


class DynamicsRow(BaseModel):
    """One logged checkpoint of a training run."""
    step: int
    train_loss: float
    eval_metric: Optional[float] = None
    sv_drift: Optional[float] = None


@dataclass
class TrainingRecord:
    """Checkpoints of a training run plus the trained adapter."""
    rows: list[DynamicsRow]
    adapter: LoftAdapter
    aborted: bool = False
    reason: Optional[str] = None


class EarlyValidationTable(BaseModel):
    """Held-out loss at steps 1..25 for each support, window averages and win counts."""
    steps: list[int]
    losses: dict[str, list[float]]
    avg_5_20: dict[str, float]
    avg_5_25: dict[str, float]
    wins_1_25: dict[str, int]
    wins_5_25: dict[str, int]


class EarlyValidationSummary(BaseModel):
    """Early-validation tables aggregated over seeds."""
    steps: list[int]
    mean_losses: dict[str, list[float]]
    avg_5_20_mean: dict[str, float]
    avg_5_20_std: dict[str, float]
    avg_5_25_mean: dict[str, float]
    avg_5_25_std: dict[str, float]
    wins_1_25: dict[str, int]
    wins_5_25: dict[str, int]


def adapter_loss_and_gradients(task: LinearTask, adapter: LoftAdapter) -> tuple[float, list[Optional[Matrix]]]:
    """
    Loss at the merged weight and the gradient for every factor's trainable parameter.

    With W = A_l S_l B_l, dL/dT_l = P_l A_l^T G B_l^T P_l^T. Prefix products A_l and the
    back-propagated C_l = G B_l^T are kept at width d, so no d x d matrix is formed.
    Orthogonal factors return dL/dE (skew), free factors dL/dT, fixed factors None.
    """
    prefixes = [np.array(adapter.base_weight)]
    for f in adapter.factors:
        prefixes.append(right_apply(prefixes[-1], f))
    loss, grad_w = loss_and_grad(task, prefixes[-1])

    grads: list[Optional[Matrix]] = [None] * len(adapter.factors)
    back = grad_w
    for i in range(len(adapter.factors) - 1, -1, -1):
        f = adapter.factors[i]
        p = f.support.p
        grad_t = (prefixes[i] @ p.T).T @ (back @ p.T)
        if f.transform.kind == "orthogonal":
            grads[i] = cayley_adjoint(f.transform.skew, grad_t)
        elif f.transform.kind == "free":
            grads[i] = grad_t
        back = right_apply_transpose(back, f)
    return loss, grads


@dataclass
class _OptimizerState:
    velocity: dict[int, Matrix] = field(default_factory=dict)
    first: dict[int, Matrix] = field(default_factory=dict)
    second: dict[int, Matrix] = field(default_factory=dict)
    t: int = 0


class Optimizer:
    """sgd, sgd_momentum or adam_like updates on each factor's parameter matrix."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state = _OptimizerState()

    def step(self, adapter: LoftAdapter, grads: Sequence[Optional[Matrix]]) -> LoftAdapter:
        cfg = self.cfg
        self.state.t += 1
        factors = []
        for i, (f, g) in enumerate(zip(adapter.factors, grads)):
            if g is None:
                factors.append(f)
                continue
            if cfg.optimizer == "sgd":
                update = g
            elif cfg.optimizer == "sgd_momentum":
                v = cfg.momentum * self.state.velocity.get(i, np.zeros_like(g)) + g
                self.state.velocity[i] = v
                update = v
            else:
                m = cfg.beta1 * self.state.first.get(i, np.zeros_like(g)) + (1.0 - cfg.beta1) * g
                s = cfg.beta2 * self.state.second.get(i, np.zeros_like(g)) + (1.0 - cfg.beta2) * g * g
                self.state.first[i] = m
                self.state.second[i] = s
                m_hat = m / (1.0 - cfg.beta1 ** self.state.t)
                s_hat = s / (1.0 - cfg.beta2 ** self.state.t)
                update = m_hat / (np.sqrt(s_hat) + cfg.eps)
            param = f.transform.parameter() - cfg.learning_rate * update
            factors.append(f.with_transform(f.transform.with_parameter(param)))
        return adapter.with_factors(factors)


def _batch(task: LinearTask, cfg: TrainConfig, rng: np.random.Generator) -> LinearTask:
    if cfg.batch_size is None or cfg.batch_size >= task.n:
        return task
    return task.columns(np.sort(rng.choice(task.n, size=cfg.batch_size, replace=False)))


def _diverged(loss: float, initial: float, factor: float) -> bool:
    return not math.isfinite(loss) or loss > factor * max(initial, np.finfo(float).tiny)


def probe(task: LinearTask, support: SupportBasis, cfg: TrainConfig,
          calibration_gradient: Optional[Matrix] = None) -> ProbeReport:
    """
    Controlled probe: only the orthogonal adapter parameter E (initialized at 0) is trained.

    The loss is recorded on the task's fixed held-out split before the first step and after
    each step. Divergence is flagged in the report and stops the run.

    Args:
        task: Task with a held-out split
        support: Support of the single probe factor
        cfg: Optimizer settings
        calibration_gradient: Signal rho is measured against; defaults to the full-batch
            training gradient at W0
    """
    train_part, heldout = split_task(task)
    adapter = single_factor_adapter(task.w0, support)
    if calibration_gradient is None:
        _, calibration_gradient = loss_and_grad(train_part, task.w0)
    rho = rho_score(task.w0, calibration_gradient, support)

    rng = np.random.default_rng(cfg.seed)
    optimizer = Optimizer(cfg)
    losses = [task_loss(heldout, merge(adapter))]
    diverged = False
    for step in range(1, cfg.steps + 1):
        try:
            _, grads = adapter_loss_and_gradients(_batch(train_part, cfg, rng), adapter)
            adapter = optimizer.step(adapter, grads)
            loss = task_loss(heldout, merge(adapter))
        except ContractError:
            # parameters or merged weight left the finite range
            loss = math.nan
        if _diverged(loss, losses[0], cfg.divergence_factor):
            logger.warning(f"Probe diverged at step {step} (loss {loss:.3e}).")
            diverged = True
            break
        losses.append(loss)

    deltas = {t: losses[0] - losses[t] for t in cfg.checkpoints if 0 <= t < len(losses)}
    return ProbeReport(method=support.provenance, r=support.r, seed=cfg.seed, rho=rho,
                       losses=losses, delta_loss=deltas, diverged=diverged)


def train(task: LinearTask, adapter: LoftAdapter, cfg: TrainConfig) -> TrainingRecord:
    """
    Train the adapter's orthogonal and free transforms; fixed transforms stay put.

    Checkpoints at step 0, every eval_every steps and the final step log the training loss,
    the held-out loss (when the task has a held-out split) and, for orthogonal adapters, the
    largest relative singular-value drift of the merged weight from W0.
    """
    if task.heldout:
        train_part, heldout = split_task(task)
    else:
        train_part, heldout = training_part(task), None
    orthogonal = is_orthogonal(adapter)
    rng = np.random.default_rng(cfg.seed)
    optimizer = Optimizer(cfg)

    def checkpoint(step: int) -> DynamicsRow:
        w = merge(adapter)
        return DynamicsRow(
            step=step,
            train_loss=task_loss(train_part, w),
            eval_metric=task_loss(heldout, w) if heldout is not None else None,
            sv_drift=geometry_residuals(task.w0, w).singular_values if orthogonal else None,
        )

    rows = [checkpoint(0)]
    initial = rows[0].train_loss
    for step in range(1, cfg.steps + 1):
        row = None
        try:
            loss, grads = adapter_loss_and_gradients(_batch(train_part, cfg, rng), adapter)
            if not _diverged(loss, initial, cfg.divergence_factor):
                adapter = optimizer.step(adapter, grads)
                row = checkpoint(step) if step % cfg.eval_every == 0 or step == cfg.steps else None
        except ContractError:
            loss, row = math.nan, None
        if row is not None and not math.isfinite(row.train_loss):
            loss = row.train_loss
        if _diverged(loss, initial, cfg.divergence_factor):
            reason = f"loss {loss!r} near step {step} is non-finite or diverged"
            logger.warning(f"Training aborted: {reason}.")
            return TrainingRecord(rows=rows, adapter=adapter, aborted=True, reason=reason)
        if row is not None:
            rows.append(row)
    logger.info(f"✓ Training finished after {cfg.steps} step(s), final loss {rows[-1].train_loss:.3e}.")
    return TrainingRecord(rows=rows, adapter=adapter)


def _labels(supports: Sequence[SupportBasis], labels: Optional[Sequence[str]]) -> list[str]:
    if labels is not None:
        if len(labels) != len(supports) or len(set(labels)) != len(labels):
            raise ConfigError("early validation labels must be unique, one per support")
        return list(labels)
    out = []
    for i, s in enumerate(supports):
        label = s.provenance
        out.append(label if label not in out else f"{label}#{i}")
    return out


def _wins(losses: dict[str, list[float]], first: int, last: int) -> dict[str, int]:
    wins = {label: 0 for label in losses}
    for step in range(first, last + 1):
        values = {label: curve[step - 1] for label, curve in losses.items()}
        best = min(values.values())
        for label, v in values.items():
            if v == best:
                wins[label] += 1
    return wins


def _window_mean(curve: Sequence[float], first: int, last: int) -> float:
    return float(np.mean(curve[first - 1:last]))


def early_validation(task: LinearTask, supports: Sequence[SupportBasis], cfg: TrainConfig,
                     labels: Optional[Sequence[str]] = None) -> EarlyValidationTable:
    """
    Held-out loss over the first 25 adapter updates for each support.

    Every support tied for the lowest loss at a step is credited a win for that step.

    Raises:
        ConfigError: If cfg.steps < 25 or no support is given
    """
    if cfg.steps < EARLY_VALIDATION_STEPS:
        raise ConfigError(f"early validation needs at least {EARLY_VALIDATION_STEPS} steps, got {cfg.steps}")
    if not supports:
        raise ConfigError("early validation needs at least one support")
    names = _labels(supports, labels)
    run_cfg = cfg.model_copy(update={"steps": EARLY_VALIDATION_STEPS})

    losses: dict[str, list[float]] = {}
    for name, support in zip(names, supports):
        report = probe(task, support, run_cfg)
        curve = report.losses[1:]
        curve += [math.inf] * (EARLY_VALIDATION_STEPS - len(curve))
        losses[name] = curve

    return EarlyValidationTable(
        steps=list(range(1, EARLY_VALIDATION_STEPS + 1)),
        losses=losses,
        avg_5_20={k: _window_mean(v, 5, 20) for k, v in losses.items()},
        avg_5_25={k: _window_mean(v, 5, 25) for k, v in losses.items()},
        wins_1_25=_wins(losses, 1, 25),
        wins_5_25=_wins(losses, 5, 25),
    )


def summarize_early_validation(tables: Sequence[EarlyValidationTable]) -> EarlyValidationSummary:
    """Mean +- std of the window averages over seeds; wins are counted on the mean curves."""
    if not tables:
        raise ConfigError("no early validation tables to summarize")
    names = list(tables[0].losses)
    mean_losses = {k: list(np.mean([t.losses[k] for t in tables], axis=0)) for k in names}
    mean_losses = {k: [float(x) for x in v] for k, v in mean_losses.items()}

    def stats(attr: str):
        values = {k: [getattr(t, attr)[k] for t in tables] for k in names}
        means = {k: float(np.mean(v)) for k, v in values.items()}
        stds = {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for k, v in values.items()}
        return means, stds

    m520, s520 = stats("avg_5_20")
    m525, s525 = stats("avg_5_25")
    return EarlyValidationSummary(
        steps=list(tables[0].steps),
        mean_losses=mean_losses,
        avg_5_20_mean=m520,
        avg_5_20_std=s520,
        avg_5_25_mean=m525,
        avg_5_25_std=s525,
        wins_1_25=_wins(mean_losses, 1, 25),
        wins_5_25=_wins(mean_losses, 5, 25),
    )
