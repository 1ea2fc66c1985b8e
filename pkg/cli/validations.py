"""
validations.py
Cross-section checks on a RunConfig that field-level validation cannot express.
"""
from cli.models import RunConfig
from services.exceptions import ConfigError
from services.training.training_service import EARLY_VALIDATION_STEPS


def validate_run_config(cfg: RunConfig, command: str) -> None:
    """
    Make sure the sections a command needs are present and mutually consistent.
    Every problem is collected before raising, so one run reports them all.

    Args:
        cfg: Parsed run configuration
        command: One of probe, train, sweep, recover

    Raises:
        ConfigError: Listing every problem found
    """
    problems = []

    if command in ("probe", "train", "sweep") and cfg.task is None:
        problems.append(f"'task' section is required for {command}")
    if command in ("probe", "train") and not cfg.supports:
        problems.append(f"'supports' must list at least one support for {command}")
    if command == "sweep" and cfg.sweep is None:
        problems.append("'sweep' section is required for sweep")
    if command == "recover" and cfg.recover is None:
        problems.append("'recover' section is required for recover")

    if cfg.task is not None and command in ("probe", "train"):
        for i, req in enumerate(cfg.supports):
            if req.r > cfg.task.d_in:
                problems.append(f"supports[{i}].r = {req.r} exceeds task.d_in = {cfg.task.d_in}")
            if req.method == "explicit" and req.matrix is not None and len(req.matrix[0]) != cfg.task.d_in:
                problems.append(f"supports[{i}].matrix has {len(req.matrix[0])} columns, task.d_in = {cfg.task.d_in}")

    if command == "probe" and cfg.probe.early_validation and cfg.train.steps < EARLY_VALIDATION_STEPS:
        problems.append(f"probe.early_validation needs train.steps >= {EARLY_VALIDATION_STEPS}, got {cfg.train.steps}")

    if command == "sweep" and cfg.sweep is not None and cfg.task is not None:
        if cfg.sweep.axis == "rank":
            bad = [v for v in cfg.sweep.grid if v != int(v) or not 1 <= v <= cfg.task.d_in]
            if bad:
                problems.append(f"rank grid values must be integers in [1, {cfg.task.d_in}], got {bad}")
        elif cfg.sweep.axis == "calibration_size":
            bad = [v for v in cfg.sweep.grid if v != int(v) or v < 1]
            if bad:
                problems.append(f"calibration_size grid values must be positive integers, got {bad}")
        else:
            bad = [v for v in cfg.sweep.grid if not 0.0 < v <= 1.0]
            if bad:
                problems.append(f"data_fraction grid values must lie in (0, 1], got {bad}")

    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
