"""Potential families, structural audits, and the mean-field drift."""

import numpy as np
import pytest
from numpy.random import Generator, Philox

from rodflow.measures import EmpiricalMeasure
from rodflow.potentials import (
    ModelParams,
    Potential,
    PotentialAuditError,
    builtin_gaussian_w,
    builtin_huber_v,
    coercive_truncation,
    drift_b,
    drift_b_all,
    drift_batch_sorted,
    table_potential,
)


def rng(seed=0):
    return Generator(Philox(key=np.array([seed, 2], dtype=np.uint64)))


# ---------------------------------------------------------------------------
# built-in families
# ---------------------------------------------------------------------------


def test_huber_basics():
    V = builtin_huber_v(1.0, 1.0)
    assert V.value(np.array([0.0]))[0] == 0.0
    assert V.derivative(np.array([0.0]))[0] == 0.0


def test_huber_asymptotic_slope():
    c = 1.7
    V = builtin_huber_v(c, 1.0)
    y = 1e6
    assert abs(V.value(np.array([y]))[0] / y - c) < 1e-4


def test_huber_coercivity_floor():
    V = builtin_huber_v(2.0, 0.5)
    c1, c2 = V.coercivity
    y = np.linspace(-30, 30, 1001)
    assert np.all(V.value(y) >= c1 * np.abs(y) - c2 - 1e-12)


def test_gaussian_w_basics():
    W = builtin_gaussian_w(0.7, 0.4)
    assert abs(W.value(np.array([0.0]))[0] - 0.7) < 1e-15
    y = np.linspace(-3, 3, 101)
    assert np.max(np.abs(W.value(y) - W.value(-y))) < 1e-12


def test_gaussian_w_integral_closed_form():
    w0, sigma = 0.7, 0.4
    W = builtin_gaussian_w(w0, sigma)
    y = np.linspace(-10 * sigma, 10 * sigma, 200_001)
    quad = np.trapezoid(W.value(y), y)
    assert abs(quad - w0 * sigma * np.sqrt(2 * np.pi)) < 1e-8


def test_gaussian_w_derivative_consistent():
    W = builtin_gaussian_w(-0.3, 0.6)
    y = np.linspace(-2, 2, 101)
    h = 1e-6
    fd = (W.value(y + h) - W.value(y - h)) / (2 * h)
    assert np.max(np.abs(fd - W.derivative(y))) < 1e-7


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------


def test_audit_rejects_non_even_interaction():
    with pytest.raises(PotentialAuditError):
        Potential(
            value=lambda y: np.asarray(y, float),
            derivative=lambda y: np.ones_like(np.asarray(y, float)),
            lipschitz_bound=1.0,
            kind="interaction",
            bound=1e4,
        )


def test_audit_rejects_missing_coercivity():
    with pytest.raises(PotentialAuditError):
        Potential(
            value=lambda y: np.zeros_like(np.asarray(y, float)),
            derivative=lambda y: np.zeros_like(np.asarray(y, float)),
            lipschitz_bound=1.0,
            kind="onsite",
        )


def test_audit_rejects_false_coercivity():
    with pytest.raises(PotentialAuditError):
        Potential(
            value=lambda y: np.zeros_like(np.asarray(y, float)),
            derivative=lambda y: np.zeros_like(np.asarray(y, float)),
            lipschitz_bound=1.0,
            kind="onsite",
            coercivity=(1.0, 0.0),
        )


def test_model_params_validation():
    V = builtin_huber_v(1.0, 1.0)
    W = builtin_gaussian_w(0.3, 0.5)
    with pytest.raises(ValueError):
        ModelParams(1.0, V, W)
    with pytest.raises(ValueError):
        ModelParams(0.5, W, None)  # wrong kind
    ModelParams(0.0, None, None)  # zero-size particles allowed


def test_coercive_truncation_tail():
    V = builtin_huber_v(2.0, 0.5)
    p = ModelParams(0.5, V, None)
    L = coercive_truncation(p, tail_tol=1e-14)
    c1, c2 = V.coercivity
    tail = np.exp(-2 * (c1 * (L - p.alpha) - c2)) / (2 * c1)
    assert tail <= 1e-14 * 1.001
    assert coercive_truncation(ModelParams(0.5, None, None)) is None


# ---------------------------------------------------------------------------
# table potential
# ---------------------------------------------------------------------------


def test_table_potential_matches_samples():
    V = builtin_huber_v(1.5, 0.8)
    y = np.linspace(-20, 20, 2001)
    csv = "y,V,V'\n" + "\n".join(
        f"{a},{b},{c}" for a, b, c in zip(y, V.value(y), V.derivative(y))
    )
    # the linear tail extension has slope V'(20) < c, so the declared
    # coercivity constants must be slightly weaker than the original pair
    T = table_potential(csv, kind="onsite", lipschitz_bound=1.502, coercivity=(1.49, 1.2))
    q = np.linspace(-15, 15, 501)
    assert np.max(np.abs(T.value(q) - V.value(q))) < 1e-6
    assert np.max(np.abs(T.derivative(q) - V.derivative(q))) < 1e-6


def test_table_potential_linear_extension():
    csv = "\n".join(f"{y},{abs(y)},{np.sign(y)}" for y in np.linspace(-5, 5, 101))
    T = table_potential(csv, kind="onsite", lipschitz_bound=1.1, coercivity=(1.0, 0.1))
    assert abs(T.value(np.array([40.0]))[0] - 40.0) < 1e-9
    assert abs(T.derivative(np.array([-40.0]))[0] + 1.0) < 1e-12


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------


def test_drift_zero_potentials():
    p = ModelParams(0.5, None, None)
    mu = EmpiricalMeasure([-1.0, 0.2, 3.0])
    assert np.all(drift_b_all(mu, p) == 0.0)


def test_drift_single_particle():
    V = builtin_huber_v(1.0, 1.0)
    p = ModelParams(0.5, V, None)
    mu = EmpiricalMeasure([0.7])
    assert abs(drift_b(0.7, mu, p) + V.derivative(np.array([0.7]))[0]) < 1e-15


def test_drift_two_particles_hand_value():
    # T maps (0, 1) to (0, 1.25); the left particle feels V'(0) = 0
    V = builtin_huber_v(1.0, 1.0)
    p = ModelParams(0.5, V, None)
    mu = EmpiricalMeasure([0.0, 1.0])
    b = drift_b_all(mu, p)
    assert abs(b[0]) < 1e-15
    assert abs(b[1] - (-1.25 / np.sqrt(1 + 1.25**2))) < 1e-12


def test_drift_all_matches_pointwise():
    r = rng(1)
    V = builtin_huber_v(1.0, 1.0)
    W = builtin_gaussian_w(0.3, 0.5)
    p = ModelParams(0.4, V, W)
    for _ in range(20):
        mu = EmpiricalMeasure(r.normal(size=int(r.integers(1, 20))))
        ball = drift_b_all(mu, p)
        single = np.array([drift_b(x, mu, p) for x in mu.points])
        assert np.max(np.abs(ball - single)) < 1e-14


def test_drift_antisymmetry():
    W = builtin_gaussian_w(0.3, 0.5)
    p = ModelParams(0.5, None, W)
    mu = EmpiricalMeasure([-0.8, 0.3])  # T-shift cancels in differences
    b = drift_b_all(mu, p)
    # symmetric configurations about the T-midpoint give opposite forces
    mu_sym = EmpiricalMeasure([-0.5, 0.5 - p.alpha / 2])
    b_sym = drift_b_all(mu_sym, p)
    assert abs(b_sym[0] + b_sym[1]) < 1e-14


def test_drift_translation_invariance_without_onsite():
    W = builtin_gaussian_w(0.4, 0.7)
    p = ModelParams(0.3, None, W)
    r = rng(2)
    pts = r.normal(size=9)
    b0 = drift_b_all(EmpiricalMeasure(pts), p)
    b1 = drift_b_all(EmpiricalMeasure(pts + 11.0), p)
    assert np.max(np.abs(b0 - b1)) < 1e-12


def test_drift_uniform_bound():
    V = builtin_huber_v(1.3, 0.9)
    W = builtin_gaussian_w(0.5, 0.4)
    p = ModelParams(0.6, V, W)
    bound = p.drift_bound()
    r = rng(3)
    for _ in range(50):
        mu = EmpiricalMeasure(r.normal(scale=3.0, size=int(r.integers(1, 40))))
        assert np.max(np.abs(drift_b_all(mu, p))) <= bound + 1e-12


def test_drift_depends_only_on_ranks_when_w_zero():
    V = builtin_huber_v(1.0, 1.0)
    p = ModelParams(0.5, V, None)
    mu = EmpiricalMeasure([0.1, 0.5, 2.0])
    b = drift_b_all(mu, p)
    shifts = 0.5 * np.array([0, 1, 2]) / 3
    expected = -V.derivative(mu.points + shifts)
    assert np.max(np.abs(b - expected)) < 1e-15


def test_drift_batch_matches_public_api_on_sorted_rows():
    r = rng(4)
    V = builtin_huber_v(1.0, 1.0)
    W = builtin_gaussian_w(0.3, 0.5)
    p = ModelParams(0.5, V, W)
    pts = np.sort(r.normal(size=(6, 12)), axis=1)
    batch = drift_batch_sorted(pts, p)
    for i in range(6):
        ref = drift_b_all(EmpiricalMeasure(pts[i]), p)
        assert np.max(np.abs(batch[i] - ref)) < 1e-14


def test_coincident_particles_share_shift():
    V = builtin_huber_v(1.0, 1.0)
    p = ModelParams(0.6, V, None)
    mu = EmpiricalMeasure([0.0, 0.0, 1.0])
    b = drift_b_all(mu, p)
    assert b[0] == b[1]  # strict-left rank 0 for both atoms at 0
