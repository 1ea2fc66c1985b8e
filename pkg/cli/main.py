"""
main.py
Command-line entry point: check | support | probe | train | sweep | recover.
"""
import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, get_args

# Add parent directory to path for direct execution
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
from pydantic import ValidationError

from cli.models import RunConfig, RunManifest
from cli.validations import validate_run_config
from services.checks.checks_service import SUITES, run_checks
from services.exceptions import EquivalenceError, LoftError, NumericalError
from services.loft.loft_service import single_factor_adapter
from services.orthogonal.orthogonal_service import TransformSpec
from services.recoveries.recoveries_service import verify_equivalence
from services.storage.storage_service import (
    hash_bytes,
    read_matrix_csv,
    save_adapter,
    write_json,
    write_line_plot_svg,
    write_matrix_csv,
    write_table_csv,
)
from services.support.support_service import SupportMethod, SupportRequest, make_support, support_diagnostics
from services.sweeps.sweeps_service import SUMMARY_HEADER, SWEEP_HEADER, sweep
from services.tasks.tasks_service import build_task, calibrate
from services.training.training_service import early_validation, probe, train

# CONFIG
LOG_LEVEL = os.environ.get("LOFT_KIT_LOG_LEVEL", "INFO")
VERSION = "1.0.0"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

PROBE_HEADER = ("step", "loss")
DYNAMICS_HEADER = ("step", "train_loss", "eval_metric")
RECOVER_HEADER = ("method", "residual", "pass")

logger = logging.getLogger(__name__)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class _Run:
    """Collects the files a command writes and records them in manifest.json."""

    def __init__(self, command: str, out: Path, config_hash: str, seeds: list[int]):
        self.command = command
        self.out = out
        self.config_hash = config_hash
        self.seeds = seeds
        self.started_at = _now()
        self.files: list[Path] = []

    def add(self, *paths: Path) -> None:
        self.files.extend(paths)

    def finish(self) -> Path:
        manifest = RunManifest(
            command=self.command,
            config_hash=self.config_hash,
            seeds=self.seeds,
            started_at=self.started_at,
            finished_at=_now(),
            version=VERSION,
            files=sorted(p.relative_to(self.out).as_posix() for p in self.files),
        )
        path = write_json(self.out / "manifest.json", manifest)
        logger.info(f"✓ {len(self.files)} file(s) written to {self.out}")
        return path


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else Path("runs") / args.command


def _args_hash(payload: dict) -> str:
    return hash_bytes(json.dumps(payload, sort_keys=True).encode())


def _load_config(args) -> tuple[RunConfig, str]:
    """Parse the JSON config and apply the --seed override."""
    raw = Path(args.config).read_bytes()
    cfg = RunConfig.model_validate_json(raw)
    if args.seed is not None:
        update = {"train": cfg.train.model_copy(update={"seed": args.seed})}
        if cfg.task is not None:
            update["task"] = cfg.task.model_copy(update={"seed": args.seed})
        if cfg.sweep is not None:
            update["sweep"] = cfg.sweep.model_copy(update={"seeds": [args.seed]})
        if cfg.recover is not None:
            update["recover"] = cfg.recover.model_copy(update={"seed": args.seed})
        cfg = cfg.model_copy(update=update)
    return cfg, hash_bytes(raw)


def _support_labels(requests: list[SupportRequest]) -> list[str]:
    labels: list[str] = []
    for i, req in enumerate(requests):
        label = req.label
        labels.append(label if label not in labels else f"{label}_{i}")
    return labels


def cmd_check(args) -> int:
    """Run the property suites; exit 0 iff every suite passes."""
    results = run_checks(seed=args.seed or 0, suites=args.suite, corrupt_support=args.inject_corrupt_support)
    payload = [r.model_dump(mode="json", by_alias=True) for r in results]
    print(json.dumps(payload, indent=2, sort_keys=True))

    if args.out:
        out = _out_dir(args)
        run = _Run("check", out, _args_hash({"command": "check", "seed": args.seed or 0, "suites": args.suite}),
                   [args.seed or 0])
        run.add(write_json(out / "check.json", results))
        run.finish()
    failed = [r.suite for r in results if not r.passed]
    if failed:
        logger.error(f"Failed suites: {', '.join(failed)}")
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_support(args) -> int:
    """Build a support from W (and G) and report its first-order diagnostics."""
    w0 = read_matrix_csv(args.weights)
    g = read_matrix_csv(args.grad) if args.grad else None
    req = SupportRequest(method=args.method, r=args.rank, seed=args.seed)
    support = make_support(req, w0, g)
    diagnostics = support_diagnostics(w0, g, support)

    out = _out_dir(args)
    run = _Run("support", out, _args_hash({"command": "support", **req.model_dump(mode="json"),
                                           "weights": hash_bytes(Path(args.weights).read_bytes()),
                                           "grad": hash_bytes(Path(args.grad).read_bytes()) if args.grad else None}),
               [args.seed] if args.seed is not None else [])
    run.add(write_matrix_csv(out / "P.csv", support.p))
    run.add(write_json(out / "support.json", diagnostics))
    run.finish()
    print(json.dumps(diagnostics.model_dump(mode="json"), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_probe(args) -> int:
    """Probe each configured support; optionally the 25-step early-validation table."""
    cfg, config_hash = _load_config(args)
    validate_run_config(cfg, "probe")
    task = build_task(cfg.task)
    g = calibrate(task, cfg.calibration.k_batches, cfg.calibration.batch_size, cfg.calibration.seed)
    labels = _support_labels(cfg.supports)
    supports = [make_support(req, task.w0, g) for req in cfg.supports]

    out = _out_dir(args)
    run = _Run("probe", out, config_hash, sorted({cfg.task.seed, cfg.train.seed}))
    reports = {}
    for label, support in zip(labels, supports):
        report = probe(task, support, cfg.train, calibration_gradient=g)
        reports[label] = report.model_dump(mode="json")
        run.add(write_table_csv(out / f"probe_{label}.csv", PROBE_HEADER, list(enumerate(report.losses))))
        if args.svg:
            run.add(write_line_plot_svg(out / f"probe_{label}.svg", range(len(report.losses)),
                                        {label: report.losses}, title=f"probe: {label}"))
    run.add(write_json(out / "probe.json", reports))

    if cfg.probe.early_validation:
        table = early_validation(task, supports, cfg.train, labels)
        rows = [(step, *(table.losses[label][i] for label in labels)) for i, step in enumerate(table.steps)]
        run.add(write_table_csv(out / "early_validation.csv", ("step", *labels), rows))
        run.add(write_json(out / "early_validation.json", table))
        if args.svg:
            run.add(write_line_plot_svg(out / "early_validation.svg", table.steps, table.losses,
                                        ylabel="held-out loss", title="early validation"))
    run.finish()
    return EXIT_OK


def cmd_train(args) -> int:
    """Train a single-factor adapter on the first configured support."""
    cfg, config_hash = _load_config(args)
    validate_run_config(cfg, "train")
    if len(cfg.supports) > 1:
        logger.warning(f"train uses the first of {len(cfg.supports)} configured supports")
    task = build_task(cfg.task)
    g = calibrate(task, cfg.calibration.k_batches, cfg.calibration.batch_size, cfg.calibration.seed)
    support = make_support(cfg.supports[0], task.w0, g)
    transform = TransformSpec.orthogonal(support.r) if cfg.transform == "orthogonal" else TransformSpec.free(support.r)
    record = train(task, single_factor_adapter(task.w0, support, transform), cfg.train)

    out = _out_dir(args)
    run = _Run("train", out, config_hash, sorted({cfg.task.seed, cfg.train.seed}))
    run.add(write_table_csv(out / "dynamics.csv", DYNAMICS_HEADER,
                            [(row.step, row.train_loss, row.eval_metric) for row in record.rows]))
    run.add(write_json(out / "dynamics.json", {
        "support": cfg.supports[0].label,
        "transform": cfg.transform,
        "rows": [row.model_dump(mode="json") for row in record.rows],
        "aborted": record.aborted,
        "reason": record.reason,
    }))
    run.add(*save_adapter(record.adapter, out / "adapter"))
    if args.svg:
        steps = [row.step for row in record.rows]
        series = {"train_loss": [row.train_loss for row in record.rows]}
        if all(row.eval_metric is not None for row in record.rows):
            series["eval_metric"] = [row.eval_metric for row in record.rows]
        run.add(write_line_plot_svg(out / "dynamics.svg", steps, series, title="training dynamics"))
    run.finish()
    if record.aborted:
        logger.error(f"Training aborted: {record.reason}")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Run the configured sweep and write per-cell and summary tables."""
    cfg, config_hash = _load_config(args)
    validate_run_config(cfg, "sweep")
    table = sweep(cfg.sweep, cfg.task, cfg.train, cfg.calibration)

    out = _out_dir(args)
    run = _Run("sweep", out, config_hash, list(cfg.sweep.seeds))
    run.add(write_table_csv(out / "sweep.csv", SWEEP_HEADER,
                            [(r.axis, r.method, r.seed, r.metric, r.value, r.rho, r.flagged) for r in table.rows]))
    run.add(write_table_csv(out / "sweep_summary.csv", SUMMARY_HEADER,
                            [(s.task, s.value, s.method, s.mean, s.std) for s in table.summary]))
    run.add(write_json(out / "sweep.json", table))
    if args.svg:
        means = {(s.value, s.method): s.mean for s in table.summary}
        series = {
            m.label: [float("nan") if means.get((v, m.label)) is None else means[(v, m.label)] for v in cfg.sweep.grid]
            for m in cfg.sweep.methods
        }
        run.add(write_line_plot_svg(out / "sweep.svg", cfg.sweep.grid, series, xlabel=cfg.sweep.axis,
                                    ylabel="mean metric", title=f"{cfg.sweep.axis} sweep"))
    run.finish()
    return EXIT_OK


def cmd_recover(args) -> int:
    """Instantiate each configured recovery and compare it with its reference construction."""
    cfg, config_hash = _load_config(args)
    validate_run_config(cfg, "recover")
    section = cfg.recover
    if args.weights:
        w0 = read_matrix_csv(args.weights)
    else:
        w0 = np.random.default_rng(section.seed).standard_normal((section.d_out, section.d_in))
    reports = [verify_equivalence(method_cfg, w0) for method_cfg in section.methods]

    out = _out_dir(args)
    run = _Run("recover", out, config_hash, [section.seed])
    run.add(write_table_csv(out / "recover.csv", RECOVER_HEADER, [(r.method, r.residual, r.passed) for r in reports]))
    payload = [
        {"method": r.method, "dims": [r.d_out, r.d_in], "residual": r.residual, "pass": r.passed,
         "tolerance": r.tolerance, "factors": r.factors, "fixed_point_residual": r.fixed_point_residual,
         "excluded": r.excluded}
        for r in reports
    ]
    run.add(write_json(out / "recover.json", payload))
    run.finish()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if not all(r.passed for r in reports):
        return EXIT_VALIDATION
    return EXIT_OK


HANDLERS = {
    "check": cmd_check,
    "support": cmd_support,
    "probe": cmd_probe,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "recover": cmd_recover,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loft-kit", description="Right-multiplicative subspace-rotation adapters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--out", default=None, help="output directory (default runs/<command>)")
    common.add_argument("--svg", action="store_true", help="also render trajectories as SVG")

    sub = parser.add_subparsers(dest="command", required=True)

    check = sub.add_parser("check", parents=[common], help="run the property suites")
    check.add_argument("--suite", action="append", choices=SUITES, default=None, help="run only this suite (repeatable)")
    check.add_argument("--inject-corrupt-support", action="store_true", help=argparse.SUPPRESS)

    support = sub.add_parser("support", parents=[common], help="build a support from CSV weights")
    support.add_argument("--weights", required=True, help="W0 as CSV")
    support.add_argument("--grad", default=None, help="calibration gradient G as CSV")
    support.add_argument("--method", required=True, choices=[m for m in get_args(SupportMethod) if m != "explicit"])
    support.add_argument("-r", "--rank", type=int, required=True, help="support width r")

    for name, text in (("probe", "probe supports on a planted task"),
                       ("train", "train an adapter on a planted task"),
                       ("sweep", "run a data-fraction, rank or calibration-size sweep"),
                       ("recover", "check recoveries of prior orthogonal adapters")):
        cmd = sub.add_parser(name, parents=[common], help=text)
        cmd.add_argument("--config", required=True, help="JSON run config")
        if name == "recover":
            cmd.add_argument("--weights", default=None, help="W0 as CSV (default: seeded Gaussian)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """
    Parse arguments, run the command and map failures to exit codes.

    Returns:
        0 success, 1 validation failure, 2 I/O or config error, 3 numerical error
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return HANDLERS[args.command](args)
    except ValidationError as e:
        for err in e.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "<root>"
            logger.error(f"config error at {loc}: {err['msg']}")
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error(f"Numerical error: {e}")
        return EXIT_NUMERICAL
    except EquivalenceError as e:
        logger.error(str(e))
        return EXIT_VALIDATION
    except (LoftError, ValueError, OSError) as e:
        logger.error(f"Error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
