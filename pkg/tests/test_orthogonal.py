import numpy as np
import pytest

from services.exceptions import ConfigError, ContractError, ShapeError
from services.orthogonal.orthogonal_service import (
    SkewParam,
    TransformSpec,
    cayley,
    cayley_adjoint,
    cayley_derivative_check,
    givens,
    householder_block,
    materialize,
)


def test_cayley_identity_and_closed_form():
    for r in (1, 2, 5):
        assert np.array_equal(cayley(SkewParam.zeros(r)), np.eye(r))

    q = cayley(SkewParam.from_matrix([[0.0, 2.0], [-2.0, 0.0]]))
    assert np.allclose(q, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-15)
    assert np.linalg.norm(q.T @ q - np.eye(2)) < 1e-15
    assert abs(np.linalg.det(q) - 1.0) < 1e-15


def test_cayley_is_special_orthogonal(rng):
    for r in (2, 3, 8):
        q = cayley(SkewParam.random(r, rng, 2.0))
        assert np.linalg.norm(q.T @ q - np.eye(r)) < 1e-12
        assert abs(np.linalg.det(q) - 1.0) < 1e-12


def test_skew_param_storage():
    e = SkewParam(dim=3, lower=[1.0, 2.0, 3.0])
    m = e.matrix
    assert np.array_equal(m, -m.T)
    assert np.array_equal(SkewParam.from_matrix(m).lower, e.lower)
    with pytest.raises(ShapeError):
        SkewParam(dim=3, lower=[1.0])
    with pytest.raises(ContractError):
        SkewParam.from_matrix([[0.0, 1.0], [1.0, 0.0]])


def test_cayley_derivative_check_examples():
    assert cayley_derivative_check(SkewParam.zeros(3), 1e-4) == 0.0
    e = SkewParam.from_matrix([[0.0, 1.0], [-1.0, 0.0]])
    assert cayley_derivative_check(e, 1e-4) <= 1e-4
    for bad in (0.0, -1e-3, 0.5):
        with pytest.raises(ConfigError):
            cayley_derivative_check(e, bad)


def test_cayley_adjoint_at_identity():
    g = np.array([[1.0, 2.0], [-4.0, 3.0]])
    assert np.allclose(cayley_adjoint(SkewParam.zeros(2), g), (g - g.T) / 2.0)
    sym = np.array([[1.0, 2.0], [2.0, 5.0]])
    assert np.all(cayley_adjoint(SkewParam.zeros(2), sym) == 0.0)


def test_cayley_adjoint_matches_finite_differences(rng):
    # d/dt <G, Q(E + tD)> at t = 0 equals <adjoint(E, G), D>
    h = 1e-5
    for r in (2, 4, 8):
        e = SkewParam.random(r, rng, 1.0)
        d = SkewParam.random(r, rng, 1.0)
        g = rng.standard_normal((r, r))
        plus = SkewParam(dim=r, lower=e.lower + h * d.lower)
        minus = SkewParam(dim=r, lower=e.lower - h * d.lower)
        numeric = (np.sum(g * cayley(plus)) - np.sum(g * cayley(minus))) / (2 * h)
        analytic = np.sum(cayley_adjoint(e, g) * d.matrix)
        err = abs(numeric - analytic) / max(abs(analytic), 1e-12)
        assert err < 1e-6


def test_cayley_adjoint_shape():
    with pytest.raises(ShapeError):
        cayley_adjoint(SkewParam.zeros(2), np.eye(3))


def test_materialize_kinds():
    assert np.array_equal(materialize(TransformSpec.free(3)), np.eye(3))
    assert np.array_equal(materialize(TransformSpec.fixed(householder_block())), [[-1.0]])
    assert np.array_equal(materialize(TransformSpec.orthogonal(4)), np.eye(4))


def test_transform_parameters():
    t = TransformSpec.orthogonal(2)
    updated = t.with_parameter([[0.0, 1.0], [-1.0, 0.0]])
    assert np.array_equal(updated.parameter(), [[0.0, 1.0], [-1.0, 0.0]])
    # original is untouched
    assert np.array_equal(t.parameter(), np.zeros((2, 2)))

    free = TransformSpec.free(2).with_parameter([[2.0, 0.0], [1.0, 1.0]])
    assert np.array_equal(materialize(free), [[2.0, 0.0], [1.0, 1.0]])

    fixed = TransformSpec.fixed(givens(0.3))
    assert not fixed.trainable
    with pytest.raises(ConfigError):
        fixed.with_parameter(np.eye(2))
    with pytest.raises(ConfigError):
        fixed.parameter()


def test_givens_is_counterclockwise():
    g = givens(np.pi / 2)
    assert np.allclose(g @ [1.0, 0.0], [0.0, 1.0])
