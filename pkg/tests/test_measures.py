"""Measure representations, conversions, and 1-D transport distances."""

import itertools

import numpy as np
import pytest
from numpy.random import Generator, Philox

from rodflow.measures import (
    DomainCoverageError,
    EmpiricalMeasure,
    GridDensity,
    Icdf,
    histogram,
    icdf_of,
    ks_distance,
    moment,
    wasserstein1,
    wasserstein2,
)


def rng(seed=0):
    return Generator(Philox(key=np.array([seed, 0], dtype=np.uint64)))


def brute_force_w2(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Exhaustive minimum over all matchings; oracle for small n."""
    n = a.n
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = np.mean((a.points[list(perm)] - b.points) ** 2)
        best = min(best, cost)
    return float(np.sqrt(best))


# ---------------------------------------------------------------------------
# icdf
# ---------------------------------------------------------------------------


def test_icdf_point_mass():
    X = icdf_of(EmpiricalMeasure([0.0]), 4)
    assert np.all(X.x_values == 0.0)


def test_icdf_two_atoms_by_hand():
    # quantiles at m in {1/8, 3/8, 5/8, 7/8} of (d0 + d1)/2, worked by hand
    X = icdf_of(EmpiricalMeasure([0.0, 1.0]), 4)
    assert np.array_equal(X.x_values, [0.0, 0.0, 1.0, 1.0])


def test_icdf_uniform_grid_density():
    g = GridDensity(0.0, 0.01, np.ones(100))
    X = icdf_of(g, 64)
    assert np.max(np.abs(X.x_values - X.m_grid)) < 1e-12


def test_icdf_monotone_on_random_inputs():
    r = rng(1)
    for _ in range(50):
        emp = EmpiricalMeasure(r.normal(size=int(r.integers(1, 40))))
        assert np.all(np.diff(icdf_of(emp, 128).x_values) >= 0)
        g = GridDensity(-1.0, 0.05, r.random(40))
        assert np.all(np.diff(icdf_of(g, 128).x_values) >= 0)


def test_icdf_skips_zero_density_cells():
    # flat CDF stretch resolves to its right end
    vals = np.array([1.0, 0.0, 0.0, 1.0])
    g = GridDensity(0.0, 1.0, vals)
    X = icdf_of(g, 2)  # midpoints 0.25, 0.75
    assert abs(X.x_values[0] - 0.5) < 1e-12
    assert abs(X.x_values[1] - 3.5) < 1e-12


def test_icdf_requires_two_midpoints():
    with pytest.raises(ValueError):
        icdf_of(EmpiricalMeasure([0.0]), 1)


# ---------------------------------------------------------------------------
# wasserstein2 / wasserstein1
# ---------------------------------------------------------------------------


def test_w2_identity():
    e = EmpiricalMeasure([0.0])
    assert wasserstein2(e, e) == 0.0


def test_w2_two_pairs_matches_brute_force():
    a = EmpiricalMeasure([0.0, 1.0])
    b = EmpiricalMeasure([2.0, 3.0])
    assert abs(wasserstein2(a, b) - 2.0) < 1e-15
    assert abs(brute_force_w2(a, b) - 2.0) < 1e-15


def test_w2_translation():
    r = rng(2)
    for shift in (0.7, -3.2):
        pts = r.normal(size=17)
        a = EmpiricalMeasure(pts)
        b = EmpiricalMeasure(pts + shift)
        assert abs(wasserstein2(a, b) - abs(shift)) < 1e-12


def test_w2_brute_force_oracle_small_n():
    r = rng(3)
    for _ in range(50):
        n = int(r.integers(1, 7))
        a = EmpiricalMeasure(r.normal(size=n))
        b = EmpiricalMeasure(r.normal(size=n))
        assert abs(wasserstein2(a, b) - brute_force_w2(a, b)) < 1e-12


def test_w2_zero_iff_icdfs_agree():
    r = rng(4)
    g1 = GridDensity(0.0, 0.1, r.random(20))
    g2 = GridDensity(0.0, 0.1, g1.values.copy())
    assert wasserstein2(g1, g2) == 0.0
    g3 = GridDensity(0.0, 0.1, r.random(20))
    d = wasserstein2(g1, g3)
    agree = np.array_equal(icdf_of(g1, 2048).x_values, icdf_of(g3, 2048).x_values)
    assert (d == 0.0) == agree


def test_w2_grid_exact_matches_fine_quadrature():
    r = rng(5)
    for _ in range(5):
        a = GridDensity(-1.0, 0.02, r.random(150) + 0.01)
        b = GridDensity(-1.4, 0.03, r.random(100))
        M = 1 << 20
        dx = icdf_of(a, M).x_values - icdf_of(b, M).x_values
        ref = float(np.sqrt(np.mean(dx * dx)))
        assert abs(wasserstein2(a, b) - ref) < 1e-8


def test_w1_trivial_and_single_transport():
    d0 = EmpiricalMeasure([0.0])
    assert wasserstein1(d0, d0) == 0.0
    assert abs(wasserstein1(d0, EmpiricalMeasure([2.5])) - 2.5) < 1e-15


def test_w1_below_w2_on_random_pairs():
    r = rng(6)
    for _ in range(100):
        n = int(r.integers(1, 30))
        a = EmpiricalMeasure(r.normal(size=n))
        b = EmpiricalMeasure(r.normal(size=n) + r.normal())
        assert wasserstein1(a, b) <= wasserstein2(a, b) + 1e-12


def test_triangle_inequality_random_triples():
    r = rng(7)
    for _ in range(50):
        ms = [EmpiricalMeasure(r.normal(size=12)) for _ in range(3)]
        d01 = wasserstein2(ms[0], ms[1])
        d12 = wasserstein2(ms[1], ms[2])
        d02 = wasserstein2(ms[0], ms[2])
        assert d02 <= d01 + d12 + 1e-9


# ---------------------------------------------------------------------------
# ks_distance
# ---------------------------------------------------------------------------


def test_ks_identical():
    e = EmpiricalMeasure([0.0, 1.0, 2.0])
    assert ks_distance(e, e) == 0.0


def test_ks_disjoint_atoms():
    assert ks_distance(EmpiricalMeasure([0.0]), EmpiricalMeasure([1.0])) == 1.0


def test_ks_half():
    a = EmpiricalMeasure([0.0, 1.0])
    b = EmpiricalMeasure([0.0])
    assert abs(ks_distance(a, b) - 0.5) < 1e-15


def test_ks_grid_vs_empirical_symmetry():
    g = GridDensity(0.0, 0.1, np.ones(10))
    e = EmpiricalMeasure([0.5])
    assert abs(ks_distance(g, e) - ks_distance(e, g)) < 1e-15


# ---------------------------------------------------------------------------
# histogram
# ---------------------------------------------------------------------------


def test_histogram_single_point():
    h = histogram(EmpiricalMeasure([0.25]), 0.0, 0.5, 4)
    assert abs(h.values[0] - 2.0) < 1e-15
    assert np.all(h.values[1:] == 0.0)


def test_histogram_equally_spaced():
    h = histogram(EmpiricalMeasure([0.125, 0.375, 0.625, 0.875]), 0.0, 0.25, 4)
    assert np.max(np.abs(h.values - 1.0)) < 1e-15


def test_histogram_mass_exact():
    r = rng(8)
    emp = EmpiricalMeasure(r.random(777))
    h = histogram(emp, 0.0, 0.1, 10)
    assert abs(h.dy * h.values.sum() - 1.0) < 1e-14


def test_histogram_uniform_monte_carlo_regression():
    r = Generator(Philox(key=np.array([2024, 0], dtype=np.uint64)))
    emp = EmpiricalMeasure(r.random(10_000))
    h = histogram(emp, 0.0, 0.05, 20)
    dev = float(np.max(np.abs(h.values - 1.0)))
    assert dev < 0.1
    # frozen baseline from the first run of this seed
    assert abs(dev - 0.058) < 1e-12


def test_histogram_domain_error():
    with pytest.raises(DomainCoverageError):
        histogram(EmpiricalMeasure([-0.1, 0.5]), 0.0, 0.1, 10)


# ---------------------------------------------------------------------------
# moment
# ---------------------------------------------------------------------------


def test_moment_atoms():
    assert moment(EmpiricalMeasure([3.0]), 1) == 3.0
    assert moment(EmpiricalMeasure([3.0]), 2) == 9.0
    assert moment(EmpiricalMeasure([-1.0, 1.0]), 1) == 0.0


def test_moment_uniform_second():
    dy = 0.001
    g = GridDensity(0.0, dy, np.ones(1000))
    assert abs(moment(g, 2) - 1.0 / 3.0) < dy**2


def test_moment_invalid_order():
    with pytest.raises(ValueError):
        moment(EmpiricalMeasure([0.0]), 3)


def test_moment_histogram_converges_linearly():
    r = rng(9)
    emp = EmpiricalMeasure(r.random(2000))
    errs = []
    for dy in (0.1, 0.05, 0.025):
        h = histogram(emp, 0.0, dy, int(round(1.0 / dy)))
        errs.append(abs(moment(h, 1) - moment(emp, 1)))
    assert errs[0] < 0.1
    assert errs[2] <= errs[0] + 1e-12


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_empirical_json_roundtrip_bit_exact():
    r = rng(10)
    emp = EmpiricalMeasure(r.normal(size=31))
    back = EmpiricalMeasure.from_json(emp.to_json())
    assert np.array_equal(back.points, emp.points)


def test_grid_json_roundtrip_bit_exact():
    r = rng(11)
    g = GridDensity(-1.2345678901234567, 0.0123456789012345, r.random(40))
    back = GridDensity.from_json(g.to_json())
    assert back.left == g.left
    assert back.dy == g.dy
    assert np.array_equal(back.values, g.values)


def test_empirical_csv_roundtrip_bit_exact():
    r = rng(12)
    emp = EmpiricalMeasure(r.normal(size=13))
    back = EmpiricalMeasure.from_csv(emp.to_csv())
    assert np.array_equal(back.points, emp.points)


def test_grid_csv_roundtrip_values_bit_exact():
    r = rng(13)
    g = GridDensity(-2.0, 0.125, r.random(32))
    back = GridDensity.from_csv(g.to_csv())
    assert np.array_equal(back.values, g.values)
    assert abs(back.left - g.left) < 1e-14
    assert abs(back.dy - g.dy) < 1e-15


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def test_constructor_sorts_and_freezes():
    emp = EmpiricalMeasure([2.0, 0.0, 1.0])
    assert np.array_equal(emp.points, [0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        emp.points[0] = 5.0


def test_grid_normalizes_mass():
    g = GridDensity(0.0, 0.5, np.array([3.0, 1.0]))
    assert abs(g.dy * g.values.sum() - 1.0) < 1e-12


def test_grid_rejects_negative_density():
    with pytest.raises(ValueError):
        GridDensity(0.0, 0.5, np.array([1.0, -0.5]))


def test_icdf_rejects_decreasing():
    with pytest.raises(ValueError):
        Icdf(np.array([0.25, 0.75]), np.array([1.0, 0.0]))
