"""
main.py
Orchestrates a small end-to-end run: planted task, calibration, supports, probe and a recovery check.
With arguments it behaves exactly like the CLI (see cli/README.md).
"""
import sys

from cli.main import main as cli_main
from services.loft.loft_service import merge, single_factor_adapter
from services.recoveries.recoveries_service import RecoveryConfig, verify_equivalence
from services.support.support_service import SupportRequest, make_support, rho_score
from services.tasks.tasks_service import calibrate, make_planted_task
from services.training.training_service import TrainConfig, probe, train

# CONFIG: change these as needed
# This file demonstrates the services working together, BUT the CLI in cli/main.py is the
# full surface (config files, CSV/JSON outputs, manifests).
D_IN = 16
D_OUT = 16
N_SAMPLES = 200
R = 4
SEED = 0


def main():
    """
    Demo workflow:
    1. Draw a planted-rotation task and its calibration gradient
    2. Compare supports by rho and by a 20-step probe
    3. Train on the best support and check a recovery
    """
    print("=" * 60)
    print("STEP 1: Planted task and calibration gradient")
    print("=" * 60)
    task = make_planted_task(D_IN, D_OUT, N_SAMPLES, R, seed=SEED)
    g = calibrate(task)
    print(f"Task: d_in={task.d_in}, d_out={task.d_out}, n={task.n}, r*={R}")

    print("\n" + "=" * 60)
    print("STEP 2: Supports and probe")
    print("=" * 60)
    cfg = TrainConfig(learning_rate=0.5, steps=20)
    supports = {}
    for method in ("skewgrad", "gradsvd", "principal", "random"):
        support = make_support(SupportRequest(method=method, r=R, seed=SEED), task.w0, g)
        report = probe(task, support, cfg, calibration_gradient=g)
        supports[method] = support
        print(f"{method:>10s}: rho={rho_score(task.w0, g, support):.4f}  dL_20={report.delta_loss.get(20, float('nan')):.4e}")

    print("\n" + "=" * 60)
    print("STEP 3: Training and recovery")
    print("=" * 60)
    record = train(task, single_factor_adapter(task.w0, supports["skewgrad"]), cfg.model_copy(update={"steps": 200}))
    print(f"Final train loss: {record.rows[-1].train_loss:.3e}  held-out: {record.rows[-1].eval_metric:.3e}")
    print(f"Merged weight norm: {float((merge(record.adapter) ** 2).sum()) ** 0.5:.6f}")
    report = verify_equivalence(RecoveryConfig(method="psoft", rank=R, seed=SEED), task.w0)
    print(f"psoft recovery residual: {report.residual:.2e} (pass={report.passed})")

    print("\n" + "=" * 60)
    print("✓ Demo complete!")
    print("=" * 60)


if __name__ == "__main__":
    if len(sys.argv) > 1:
        sys.exit(cli_main(sys.argv[1:]))
    main()
