from itertools import combinations

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.linalg import block_diag

from services.exceptions import ConfigError, MissingInputError, ShapeError
from services.linalg.linalg_service import principal_angles, qr_orthonormal_rows, random_orthogonal
from services.loft.loft_service import SupportBasis
from services.orthogonal.orthogonal_service import SkewParam
from services.support.support_service import (
    SupportRequest,
    butterfly_blocks,
    directional_derivative,
    make_support,
    projected_gradient,
    psoft_optimality_check,
    reduce_gradients,
    rho_score,
    signal_bound,
    skew_signal,
    support_diagnostics,
)

PLANTED_G = np.array([
    [0.0, 5.0, 0.0, 0.0],
    [-5.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0],
])


def _support(method, r, w0=None, g=None, **kw):
    return make_support(SupportRequest(method=method, r=r, **kw), w0, g)


def test_skew_signal_examples(rng):
    w0 = rng.standard_normal((5, 5))
    sig = skew_signal(w0, w0)
    assert np.linalg.norm(sig.f) < 1e-14
    assert np.all(sig.mu < 1e-14)

    sig = skew_signal(np.eye(3), PLANTED_G[:3, :3])
    assert np.array_equal(sig.f, PLANTED_G[:3, :3])
    assert sig.mu.shape == (1,)
    assert abs(sig.mu[0] - 5.0) < 1e-12


def test_skew_signal_pairing(rng):
    sig = skew_signal(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)))
    assert np.linalg.norm(sig.f + sig.f.T) <= 1e-10
    assert sig.mu.shape == (4,) and np.all(sig.mu >= 0)
    fro = np.sum(sig.f ** 2)
    assert abs(2.0 * np.sum(sig.mu ** 2) - fro) <= 1e-8 * fro


def test_make_support_principal_and_skewgrad():
    p = _support("principal", 2, w0=np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(np.abs(p.p), np.eye(3)[:2])

    p = _support("skewgrad", 2, w0=np.eye(4), g=PLANTED_G)
    assert np.max(principal_angles(p.p, np.eye(4)[:2])) < 1e-7


def test_make_support_random_is_seeded():
    a = _support("random", 3, w0=np.eye(7), seed=11)
    b = _support("random", 3, w0=np.eye(7), seed=11)
    assert np.array_equal(a.p, b.p)
    assert np.linalg.norm(a.p @ a.p.T - np.eye(3)) <= 1e-10


def test_make_support_every_method_is_orthonormal(rng):
    w0 = rng.standard_normal((6, 8))
    g = rng.standard_normal((6, 8))
    requests = [
        SupportRequest(method="principal", r=3),
        SupportRequest(method="gradsvd", r=3),
        SupportRequest(method="skewgrad", r=3),
        SupportRequest(method="random", r=3, seed=2),
        SupportRequest(method="coordinate", r=3, indices=[7, 0, 2]),
        SupportRequest(method="coordinate", r=2, block_index=3),
        SupportRequest(method="butterfly", r=4, stage=1, block_index=1),
        SupportRequest(method="explicit", r=1, matrix=[[1.0, 0, 0, 0, 0, 0, 0, 0]]),
    ]
    for req in requests:
        p = make_support(req, w0, g)
        assert p.provenance == req.method
        assert np.linalg.norm(p.p @ p.p.T - np.eye(req.r)) <= 1e-10


def test_make_support_errors(rng):
    w0 = rng.standard_normal((4, 4))
    with pytest.raises(MissingInputError):
        _support("gradsvd", 2, w0=w0)
    with pytest.raises(MissingInputError):
        _support("skewgrad", 2, g=w0)
    with pytest.raises(ConfigError):
        _support("principal", 5, w0=w0)
    with pytest.raises(ConfigError):
        _support("coordinate", 2, w0=w0, indices=[1, 1])
    with pytest.raises(ValidationError):
        SupportRequest(method="explicit", r=2)
    with pytest.raises(ValidationError):
        SupportRequest(method="butterfly", r=3)
    with pytest.raises(ValidationError):
        SupportRequest(method="random", r=2, extra=1)


def test_reduce_gradients_sums_lists(rng):
    parts = [rng.standard_normal((3, 4)) for _ in range(3)]
    assert np.allclose(reduce_gradients(parts), sum(parts))
    single = _support("gradsvd", 2, g=sum(parts))
    listed = _support("gradsvd", 2, g=parts)
    assert np.max(principal_angles(single.p, listed.p)) < 1e-7


def test_butterfly_blocks():
    assert butterfly_blocks(8, 2, 0) == [[0, 1], [2, 3], [4, 5], [6, 7]]
    assert butterfly_blocks(8, 2, 1) == [[0, 2], [1, 3], [4, 6], [5, 7]]
    assert butterfly_blocks(8, 2, 2) == [[0, 4], [1, 5], [2, 6], [3, 7]]
    for stage in range(3):
        blocks = butterfly_blocks(8, 4, stage)
        assert sorted(i for b in blocks for i in b) == list(range(8))
    with pytest.raises(ConfigError):
        butterfly_blocks(6, 2, 0)


def test_directional_derivative_examples(rng):
    w0 = np.eye(4)
    p = SupportBasis(p=np.eye(4)[:2])
    assert directional_derivative(w0, PLANTED_G, p, SkewParam.zeros(2)) == 0.0
    e = SkewParam.from_matrix([[0.0, 1.0], [-1.0, 0.0]])
    assert abs(directional_derivative(w0, PLANTED_G, p, e) - 10.0) < 1e-12

    w0 = rng.standard_normal((5, 6))
    g = rng.standard_normal((5, 6))
    p = _support("random", 3, w0=w0, seed=4)
    e = SkewParam.random(3, rng)
    identity = np.sum(projected_gradient(w0, g, p) * e.matrix)
    assert abs(directional_derivative(w0, g, p, e) - identity) <= 1e-12


def test_projected_gradient_examples():
    w0 = np.eye(4)
    null = SupportBasis(p=np.eye(4)[2:])
    assert np.all(projected_gradient(w0, PLANTED_G, null) == 0.0)

    p = _support("skewgrad", 2, w0=w0, g=PLANTED_G)
    assert abs(np.sum(projected_gradient(w0, PLANTED_G, p) ** 2) - 50.0) < 1e-10


def test_signal_bound_holds_for_random_supports(rng):
    for _ in range(100):
        d = int(rng.integers(2, 12))
        r = int(rng.integers(1, d + 1))
        w0, g = rng.standard_normal((d, d)), rng.standard_normal((d, d))
        sig = skew_signal(w0, g)
        p = SupportBasis(p=qr_orthonormal_rows(rng.standard_normal((r, d))))
        captured = np.sum(projected_gradient(w0, g, p) ** 2)
        assert captured <= signal_bound(sig.mu, r) + 1e-8


def test_skewgrad_attains_bound_and_maximizes_rho(rng):
    for trial in range(30):
        w0, g = rng.standard_normal((9, 8)), rng.standard_normal((9, 8))
        for r in (2, 3, 4):
            sg = _support("skewgrad", r, w0=w0, g=g)
            bound = signal_bound(skew_signal(w0, g).mu, r)
            captured = np.sum(projected_gradient(w0, g, sg) ** 2)
            assert abs(captured - bound) <= 1e-8 * bound
            rho_sg = rho_score(w0, g, sg)
            assert abs(rho_sg - 1.0) <= 1e-8
            for method in ("principal", "gradsvd", "random"):
                other = _support(method, r, w0=w0, g=g, seed=trial)
                assert rho_score(w0, g, other) <= rho_sg + 1e-8


def test_skewgrad_with_tied_pair_magnitudes(rng):
    # two planes with equal magnitude, hidden behind a random rotation
    j = np.array([[0.0, 1.0], [-1.0, 0.0]])
    for _ in range(20):
        q = random_orthogonal(4, rng)
        g = q @ block_diag(j, j) @ q.T
        for r in (2, 3):
            sg = _support("skewgrad", r, w0=np.eye(4), g=g)
            assert abs(rho_score(np.eye(4), g, sg) - 1.0) <= 1e-8
            captured = np.sum(projected_gradient(np.eye(4), g, sg) ** 2)
            assert abs(captured - signal_bound(skew_signal(np.eye(4), g).mu, r)) <= 1e-8

    d = 8
    blocks = block_diag(3.0 * j, 3.0 * j, 3.0 * j, 1.0 * j)
    q = random_orthogonal(d, rng)
    w0 = rng.standard_normal((d, d))
    g = np.linalg.solve(w0.T, q @ blocks @ q.T)
    for r in (2, 4, 5, 6):
        sg = _support("skewgrad", r, w0=w0, g=g)
        assert abs(rho_score(w0, g, sg) - 1.0) <= 1e-8


def test_gradsvd_maximizes_captured_gradient(rng):
    g = rng.standard_normal((3, 4))
    best = _support("gradsvd", 2, g=g)
    captured = np.sum((g @ best.p.T) ** 2)
    for pair in combinations(range(4), 2):
        coords = np.eye(4)[list(pair)]
        assert np.sum((g @ coords.T) ** 2) <= captured + 1e-12


def test_rho_score_examples(rng):
    w0 = np.eye(4)
    assert abs(rho_score(w0, PLANTED_G, SupportBasis(p=np.eye(4))) - 1.0) < 1e-12
    assert rho_score(w0, PLANTED_G, SupportBasis(p=np.eye(4)[2:])) == 0.0
    assert rho_score(w0, np.zeros((4, 4)), SupportBasis(p=np.eye(4)[:2])) == 1.0


def test_rho_score_over_layers(rng):
    w0s = [rng.standard_normal((5, 5)) for _ in range(3)]
    gs = [rng.standard_normal((5, 5)) for _ in range(3)]
    sgs = [_support("skewgrad", 2, w0=w, g=g) for w, g in zip(w0s, gs)]
    assert abs(rho_score(w0s, gs, sgs) - 1.0) <= 1e-8
    mixed = sgs[:2] + [_support("skewgrad", 4, w0=w0s[2], g=gs[2])]
    with pytest.raises(ConfigError):
        rho_score(w0s, gs, mixed)
    with pytest.raises(ShapeError):
        rho_score(w0s, gs[:2], sgs)


def test_psoft_optimality_check(rng):
    d, r = 6, 2
    w0 = rng.standard_normal((d, d))
    vt = np.linalg.svd(w0)[2]
    m = np.zeros((d, d))
    m[:r, :r] = [[0.0, 50.0], [-50.0, 0.0]]
    m[r:, r:] = 0.1 * rng.standard_normal((d - r, d - r))
    g = np.linalg.solve(w0.T, vt.T @ m @ vt)
    aligned = psoft_optimality_check(w0, g, r)
    assert aligned.invariant and aligned.attains_bound

    generic = psoft_optimality_check(w0, rng.standard_normal((d, d)), r)
    assert generic.f_rperp_norm > 1e-4 * generic.f_norm
    assert generic.rho_principal < 1.0 - 1e-4

    zero = psoft_optimality_check(w0, np.zeros((d, d)), r)
    assert zero.invariant and zero.rho_principal == 1.0

    with pytest.raises(ConfigError):
        psoft_optimality_check(w0, g, d)


def test_support_diagnostics(rng):
    w0, g = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    sg = _support("skewgrad", 2, w0=w0, g=g)
    diag = support_diagnostics(w0, g, sg)
    assert abs(diag.rho - 1.0) <= 1e-8
    assert abs(diag.grad_norm_sq - diag.bound) <= 1e-8 * diag.bound
    # the skewgrad support is invariant, so no signal leaks out of it
    assert diag.f_rperp_norm <= 1e-8 * np.linalg.norm(skew_signal(w0, g).f)

    empty = support_diagnostics(w0, None, sg)
    assert empty.rho is None and empty.bound is None and empty.r == 2
