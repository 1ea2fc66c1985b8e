import numpy as np
import pytest
from pydantic import ValidationError

from services.exceptions import ConfigError
from services.loft.loft_service import merge
from services.recoveries.recoveries_service import (
    EXCLUDED_EXTRAS,
    GivensRotation,
    RecoveryConfig,
    instantiate,
    verify_equivalence,
)


def test_hra_single_reflection_flips_first_column(rng):
    w0 = rng.standard_normal((3, 4))
    cfg = RecoveryConfig(method="hra", householder=[[1.0, 0.0, 0.0, 0.0]])
    merged = merge(instantiate(cfg, w0))
    expected = w0.copy()
    expected[:, 0] *= -1.0
    assert np.linalg.norm(merged - expected) < 1e-15
    assert verify_equivalence(cfg, w0).passed


def test_block_oft_identity_blocks_leave_weight_unchanged(rng):
    w0 = rng.standard_normal((5, 8))
    report = verify_equivalence(RecoveryConfig(method="block_oft", block_size=4), w0)
    assert report.factors == 2
    assert report.residual == 0.0
    assert np.array_equal(merge(instantiate(RecoveryConfig(method="block_oft", block_size=4), w0)), w0)


def test_goft_quarter_turn():
    cfg = RecoveryConfig(method="goft", givens=[GivensRotation(i=0, j=1, theta_deg=90.0)])
    merged = merge(instantiate(cfg, np.eye(4)))
    expected = np.eye(4)
    expected[:2, :2] = [[0.0, -1.0], [1.0, 0.0]]
    assert np.allclose(merged, expected, atol=1e-15)
    assert verify_equivalence(cfg, np.eye(4)).residual <= 1e-12


def test_every_method_matches_its_reference(rng):
    w0 = rng.standard_normal((6, 8))
    configs = [
        RecoveryConfig(method="full_oft", seed=1),
        RecoveryConfig(method="block_oft", block_size=4, seed=2),
        RecoveryConfig(method="goft", givens=[
            GivensRotation(i=0, j=1, theta_deg=30.0),
            GivensRotation(i=2, j=5, theta_deg=-45.0),
            GivensRotation(i=1, j=3, theta_deg=60.0),
        ]),
        RecoveryConfig(method="boft", seed=3),
        RecoveryConfig(method="hra", n_reflections=3, seed=4),
        RecoveryConfig(method="psoft", rank=3, seed=5),
    ]
    for cfg in configs:
        report = verify_equivalence(cfg, w0, strict=True)
        assert report.passed
        assert report.residual <= 1e-9
        assert report.excluded == EXCLUDED_EXTRAS[cfg.method]


def test_hra_three_reflections(rng):
    w0 = rng.standard_normal((8, 8))
    report = verify_equivalence(RecoveryConfig(method="hra", n_reflections=3, seed=7), w0)
    assert report.residual <= 1e-10
    # a product of L reflections has determinant (-1)^L
    s = np.linalg.solve(w0, merge(instantiate(RecoveryConfig(method="hra", n_reflections=3, seed=7), w0)))
    assert abs(np.linalg.det(s) + 1.0) < 1e-10


def test_psoft_fixes_the_trailing_subspace(rng):
    w0 = rng.standard_normal((6, 10))
    report = verify_equivalence(RecoveryConfig(method="psoft", rank=3, seed=11), w0)
    assert report.residual <= 1e-9
    assert report.fixed_point_residual is not None
    assert report.fixed_point_residual <= 1e-10


def test_boft_identity_blocks(rng):
    w0 = rng.standard_normal((4, 8))
    adapter = instantiate(RecoveryConfig(method="boft"), w0)
    # log2(8) stages of 4 blocks each
    assert len(adapter.factors) == 12
    assert np.array_equal(merge(adapter), w0)


def test_block_factors_commute(rng):
    w0 = rng.standard_normal((5, 8))
    adapter = instantiate(RecoveryConfig(method="block_oft", block_size=2, seed=9), w0)
    shuffled = adapter.__class__(base_weight=w0, factors=tuple(reversed(adapter.factors)))
    assert np.linalg.norm(merge(adapter) - merge(shuffled)) <= 1e-12


def test_recovery_config_errors(rng):
    w0 = rng.standard_normal((4, 6))
    with pytest.raises(ConfigError):
        instantiate(RecoveryConfig(method="block_oft", block_size=4), w0)
    with pytest.raises(ConfigError):
        instantiate(RecoveryConfig(method="boft"), w0)
    with pytest.raises(ConfigError):
        instantiate(RecoveryConfig(method="goft"), w0)
    with pytest.raises(ConfigError):
        instantiate(RecoveryConfig(method="goft", givens=[GivensRotation(i=2, j=2, theta_deg=1.0)]), w0)
    with pytest.raises(ConfigError):
        instantiate(RecoveryConfig(method="psoft", rank=5), w0)
    with pytest.raises(ConfigError):
        instantiate(RecoveryConfig(method="hra", householder=[[0.0] * 6]), w0)
    with pytest.raises(ConfigError):
        instantiate(RecoveryConfig(method="hra", householder=[[1.0, 0.0]]), w0)
    with pytest.raises(ValidationError):
        RecoveryConfig(method="loRA")


def test_excluded_extras_are_reported():
    assert EXCLUDED_EXTRAS["goft"] and EXCLUDED_EXTRAS["hra"] and EXCLUDED_EXTRAS["psoft"]
    assert EXCLUDED_EXTRAS["full_oft"] == []

