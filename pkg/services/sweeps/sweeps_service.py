"""
sweeps_service.py
Grid sweeps over data fraction, support rank or calibration size. Cells
(grid value x method x seed) are independent and run on a thread pool capped
by LOFT_KIT_THREADS; rows come back in grid order regardless of scheduling.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from services.exceptions import ConfigError, LoftError
from services.loft.loft_service import single_factor_adapter
from services.orthogonal.orthogonal_service import TransformSpec
from services.support.support_service import SupportMethod, SupportRequest, make_support, rho_score
from services.tasks.tasks_service import CalibrationConfig, TaskConfig, build_task, calibrate, subsample
from services.training.training_service import TrainConfig, probe, train

logger = logging.getLogger(__name__)

# Configuration
THREADS_ENV = "LOFT_KIT_THREADS"

SweepAxis = Literal["data_fraction", "rank", "calibration_size"]

SWEEP_HEADER = ("axis", "method", "seed", "metric", "value", "rho", "flagged")
SUMMARY_HEADER = ("task", "value", "method", "mean", "std")


def _max_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'") from e


class MethodSpec(BaseModel):
    """A support method paired with the transform trained inside it."""
    model_config = ConfigDict(extra="forbid")

    support: SupportMethod
    transform: Literal["orthogonal", "free"] = "orthogonal"

    @property
    def label(self) -> str:
        return self.support if self.transform == "orthogonal" else f"{self.support}+free"


class SweepConfig(BaseModel):
    """Grid, methods and seeds of one sweep."""
    model_config = ConfigDict(extra="forbid")

    axis: SweepAxis
    grid: list[float] = Field(min_length=1)
    methods: list[MethodSpec] = Field(default_factory=lambda: [MethodSpec(support="skewgrad"), MethodSpec(support="random")])
    seeds: list[int] = Field(default_factory=lambda: [0])
    rank: int = Field(default=4, ge=1)
    task_label: str = "planted"

    @field_validator("methods", "seeds")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("must not be empty")
        return v


class SweepRow(BaseModel):
    axis: str
    value: float
    method: str
    seed: int
    metric: Optional[float] = None
    rho: Optional[float] = None
    flagged: bool = False


class SummaryRow(BaseModel):
    task: str
    value: float
    method: str
    mean: Optional[float] = None
    std: Optional[float] = None


class SweepTable(BaseModel):
    """Per-cell rows plus the per-(value, method) summary."""
    rows: list[SweepRow]
    summary: list[SummaryRow]


def _run_cell(axis: SweepAxis, value: float, method: MethodSpec, seed: int, task_cfg: TaskConfig,
              train_cfg: TrainConfig, calibration: CalibrationConfig, rank: int) -> SweepRow:
    row = SweepRow(axis=axis, value=value, method=method.label, seed=seed)
    try:
        task = build_task(task_cfg, seed=seed)
        cfg = train_cfg.model_copy(update={"seed": seed})
        k = calibration.k_batches
        r = rank
        if axis == "data_fraction":
            task = subsample(task, value, seed)
        elif axis == "rank":
            r = int(value)
        else:
            k = int(value)

        g = calibrate(task, k_batches=k, batch_size=calibration.batch_size, seed=calibration.seed + seed)
        support = make_support(SupportRequest(method=method.support, r=r, seed=seed), task.w0, g)
        row.rho = rho_score(task.w0, g, support)

        if axis == "calibration_size":
            report = probe(task, support, cfg, calibration_gradient=g)
            if report.delta_loss:
                row.metric = report.delta_loss[max(report.delta_loss)]
            row.flagged = report.diverged
        else:
            transform = TransformSpec.orthogonal(r) if method.transform == "orthogonal" else TransformSpec.free(r)
            record = train(task, single_factor_adapter(task.w0, support, transform), cfg)
            row.metric = record.rows[-1].eval_metric
            row.flagged = record.aborted
    except (LoftError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        logger.warning(f"Sweep cell {axis}={value} {method.label} seed={seed} failed: {e}")
        row.flagged = True
    if row.metric is not None and not math.isfinite(row.metric):
        row.flagged = True
    return row


def summarize(rows: list[SweepRow], task_label: str = "planted") -> list[SummaryRow]:
    """Mean and sample std of unflagged metrics per (value, method), in first-seen order."""
    groups: dict[tuple[float, str], list[float]] = {}
    for row in rows:
        values = groups.setdefault((row.value, row.method), [])
        if not row.flagged and row.metric is not None:
            values.append(row.metric)
    summary = []
    for (value, method), metrics in groups.items():
        if metrics:
            mean = float(np.mean(metrics))
            std = float(np.std(metrics, ddof=1)) if len(metrics) > 1 else 0.0
        else:
            mean = std = None
        summary.append(SummaryRow(task=task_label, value=value, method=method, mean=mean, std=std))
    return summary


def sweep(sweep_cfg: SweepConfig, task_cfg: TaskConfig, train_cfg: TrainConfig,
          calibration: Optional[CalibrationConfig] = None, threads: Optional[int] = None) -> SweepTable:
    """
    Run every (grid value, method, seed) cell and assemble the table.

    data_fraction and rank cells report the final held-out loss of a training run;
    calibration_size cells report the probe loss reduction at the largest checkpoint.
    Failing or diverging cells are flagged rows, never exceptions.
    """
    calibration = calibration or CalibrationConfig()
    workers = max(1, threads if threads is not None else _max_threads())
    cells = [(value, method, seed) for value in sweep_cfg.grid for method in sweep_cfg.methods for seed in sweep_cfg.seeds]
    logger.info(f"Running {sweep_cfg.axis} sweep: {len(cells)} cell(s) on {workers} thread(s)...")

    def run(cell):
        value, method, seed = cell
        return _run_cell(sweep_cfg.axis, value, method, seed, task_cfg, train_cfg, calibration, sweep_cfg.rank)

    if workers == 1:
        rows = [run(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(run, cells))

    flagged = sum(r.flagged for r in rows)
    logger.info(f"✓ Sweep finished ({flagged} flagged cell(s)).")
    return SweepTable(rows=rows, summary=summarize(rows, sweep_cfg.task_label))
