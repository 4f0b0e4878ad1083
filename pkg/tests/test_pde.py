"""Finite-volume solvers and the steady-state minimizer."""

import numpy as np
import pytest
from numpy.random import Generator, Philox

from rodflow.measures import GridDensity, wasserstein2
from rodflow.pde import (
    DensityPath,
    PdeConfig,
    StabilityError,
    convolve_on_grid,
    density_from_potential_level,
    make_convolver,
    solve_bruna_chapman,
    solve_compressed_fp,
    solve_level_for_mass,
    solve_limit_pde,
    steady_state,
)
from rodflow.potentials import ModelParams, builtin_gaussian_w, builtin_huber_v

HUBER = builtin_huber_v(2.0, 0.5)


def rng(seed=0):
    return Generator(Philox(key=np.array([seed, 4], dtype=np.uint64)))


def gaussian_density(cfg: PdeConfig, mean: float, sigma: float) -> GridDensity:
    yc = cfg.centers()
    return GridDensity(cfg.left, cfg.dy, np.exp(-((yc - mean) ** 2) / (2 * sigma**2)))


# ---------------------------------------------------------------------------
# convolution helper
# ---------------------------------------------------------------------------


def test_convolution_matches_direct_quadrature():
    r = rng(1)
    vals = r.random(151)
    dy = 0.03
    yc = np.arange(151) * dy
    W = lambda y: 0.4 * np.exp(-np.asarray(y, float) ** 2)
    direct = np.array([np.sum(W(yc[j] - yc) * vals) * dy for j in range(151)])
    assert np.max(np.abs(convolve_on_grid(W, vals, dy) - direct)) < 1e-12


def test_convolver_fft_and_direct_agree():
    r = rng(2)
    W = lambda y: np.exp(-np.abs(np.asarray(y, float)))
    for N in (64, 500):
        vals = r.random(N)
        ref = convolve_on_grid(W, vals, 0.01) if N <= 192 else None
        conv = make_convolver(W, N, 0.01)
        direct = np.convolve(vals, W(0.01 * np.arange(-(N - 1), N)) * 0.01)[N - 1 : 2 * N - 1]
        assert np.max(np.abs(conv(vals) - direct)) < 1e-12


# ---------------------------------------------------------------------------
# limit equation
# ---------------------------------------------------------------------------


def test_heat_kernel_oracle_at_alpha_zero():
    p = ModelParams(0.0, None, None)
    cfg = PdeConfig(-6, 6, 0.01, t_final=0.5, record_every=10**9)
    sig0 = 0.4
    rho0 = gaussian_density(cfg, 0.0, sig0)
    path = solve_limit_pde(rho0, p, cfg)
    yc = cfg.centers()
    sigT = np.sqrt(sig0**2 + 0.5)
    exact = np.exp(-(yc**2) / (2 * sigT**2)) / (sigT * np.sqrt(2 * np.pi))
    assert cfg.dy * np.sum(np.abs(path.states[-1].values - exact)) < 1e-3


def test_mass_conserved_to_roundoff():
    p = ModelParams(0.5, HUBER, builtin_gaussian_w(0.3, 0.5))
    cfg = PdeConfig(-7, 7, 0.02, t_final=0.05, record_every=200)
    path = solve_limit_pde(gaussian_density(cfg, 0.8, 0.5), p, cfg)
    for s in path.states:
        assert abs(s.dy * s.values.sum() - 1.0) < 1e-10


def test_steady_state_is_fixed_point_of_solver():
    p = ModelParams(0.5, HUBER, None)
    star = steady_state(p, -7, 7, 0.01)
    cfg = PdeConfig(-7, 7, 0.01, t_final=1.0, record_every=10**9)
    path = solve_limit_pde(star, p, cfg)
    assert wasserstein2(path.states[-1], star) < 1e-4


def test_rost_equation_from_uniform_block():
    # no potentials, half packing: mass, positivity, max principle
    p = ModelParams(0.5, None, None)
    results = {}
    for dy in (0.02, 0.01):
        cfg = PdeConfig(-4, 5, dy, t_final=0.25, record_every=2000)
        yc = cfg.centers()
        rho0 = GridDensity(cfg.left, dy, ((yc > 0) & (yc < 1)).astype(float))
        path = solve_limit_pde(rho0, p, cfg)
        maxima = [float(np.max(s.values)) for s in path.states]
        assert all(m >= 0 for m in maxima)
        assert all(
            maxima[i + 1] <= maxima[i] + 1e-10 for i in range(len(maxima) - 1)
        ), "max density must not increase"
        assert abs(path.states[-1].dy * path.states[-1].values.sum() - 1.0) < 1e-10
        results[dy] = maxima[-1]
    # grid refinement leaves the maximum-principle conclusion unchanged
    assert abs(results[0.02] - results[0.01]) < 0.02


def test_free_energy_decreases_along_flow():
    from rodflow.functionals import free_energy

    p = ModelParams(0.5, HUBER, builtin_gaussian_w(0.2, 0.6))
    cfg = PdeConfig(-7, 7, 0.02, t_final=0.1, record_every=500)
    path = solve_limit_pde(gaussian_density(cfg, 1.0, 0.5), p, cfg)
    fes = [free_energy(s, p).total_unnormalized for s in path.states]
    assert max(np.diff(fes)) <= 1e-6


def test_grid_convergence_under_halving():
    p = ModelParams(0.5, HUBER, None)
    T = 0.05
    sol = {}
    for dy in (0.04, 0.02, 0.01):
        cfg = PdeConfig(-7, 7, dy, t_final=T, dt=0.25 * 0.4 * 0.01**2 * 0.4, record_every=10**9)
        sol[dy] = solve_limit_pde(gaussian_density(cfg, 0.8, 0.5), p, cfg)

    def l1_gap(fine: DensityPath, coarse: DensityPath):
        f = fine.states[-1]
        c = coarse.states[-1]
        ratio = f.count // c.count
        coarsened = f.values.reshape(c.count, ratio).mean(axis=1)
        return c.dy * float(np.sum(np.abs(coarsened - c.values)))

    e1 = l1_gap(sol[0.02], sol[0.04])
    e2 = l1_gap(sol[0.01], sol[0.02])
    assert e1 / e2 >= 1.7


def test_stability_error_on_oversized_step():
    p = ModelParams(0.5, HUBER, None)
    bound = 0.4 * 0.02**2 * (1 - 0.5 * 0.8) ** 2
    cfg = PdeConfig(-7, 7, 0.02, t_final=0.1, dt=5 * bound, record_every=10**9)
    with pytest.raises(StabilityError):
        solve_limit_pde(gaussian_density(cfg, 0.0, 0.5), p, cfg)


def test_initial_grid_mismatch_rejected():
    p = ModelParams(0.5, HUBER, None)
    cfg = PdeConfig(-7, 7, 0.02, t_final=0.1, record_every=10**9)
    bad = GridDensity(-6.0, 0.02, np.ones(650))
    with pytest.raises(ValueError):
        solve_limit_pde(bad, p, cfg)


def test_wall_audit_warns_on_narrow_domain():
    p = ModelParams(0.0, None, None)
    cfg = PdeConfig(-1.5, 1.5, 0.01, t_final=0.3, record_every=10**9)
    with pytest.warns(RuntimeWarning, match="boundary density"):
        solve_limit_pde(gaussian_density(cfg, 0.0, 0.4), p, cfg)


# ---------------------------------------------------------------------------
# small-volume-fraction approximation
# ---------------------------------------------------------------------------


def test_bruna_chapman_equals_limit_pde_at_alpha_zero():
    p = ModelParams(0.0, HUBER, None)
    cfg = PdeConfig(-6, 6, 0.01, t_final=0.1, dt=2e-5, record_every=10**9)
    rho0 = gaussian_density(cfg, 0.5, 0.4)
    a = solve_limit_pde(rho0, p, cfg)
    b = solve_bruna_chapman(rho0, p, cfg)
    assert np.max(np.abs(a.states[-1].values - b.states[-1].values)) < 1e-8


def test_bruna_chapman_mass_conservation():
    p = ModelParams(0.08, HUBER, None)
    cfg = PdeConfig(-6, 6, 0.02, t_final=0.1, record_every=10**9)
    path = solve_bruna_chapman(gaussian_density(cfg, 0.5, 0.4), p, cfg)
    assert abs(path.states[-1].dy * path.states[-1].values.sum() - 1.0) < 1e-12


def test_bruna_chapman_rejects_interaction():
    p = ModelParams(0.1, HUBER, builtin_gaussian_w(0.1, 0.5))
    cfg = PdeConfig(-6, 6, 0.02, t_final=0.1, record_every=10**9)
    with pytest.raises(ValueError):
        solve_bruna_chapman(gaussian_density(cfg, 0.0, 0.4), p, cfg)


# ---------------------------------------------------------------------------
# steady state
# ---------------------------------------------------------------------------


def test_steady_state_gibbs_at_alpha_zero():
    p = ModelParams(0.0, HUBER, None)
    star = steady_state(p, -8, 8, 0.005)
    yc = star.centers()
    gibbs = np.exp(-2 * HUBER.value(yc))
    gibbs /= 0.005 * gibbs.sum()
    assert 0.005 * np.sum(np.abs(star.values - gibbs)) < 1e-6


def test_steady_state_even_for_even_potentials():
    p = ModelParams(0.5, HUBER, builtin_gaussian_w(0.3, 0.5))
    star = steady_state(p, -6, 6, 0.01)
    assert np.max(np.abs(star.values - star.values[::-1])) < 1e-10


def test_steady_state_first_order_condition():
    from rodflow.functionals import xi_field

    p = ModelParams(0.5, HUBER, None)
    star = steady_state(p, -7, 7, 0.005)
    field = xi_field(star, p)
    mask = field.support & (star.values > 1e-8)
    med = np.nanmedian(field.values[mask])
    assert np.nanmax(np.abs(field.values[mask] - med)) < 1e-6


def test_level_inversion_roundtrip():
    r = rng(3)
    for alpha in (0.0, 0.3, 0.9):
        c = r.normal(size=50)
        lam, rho = solve_level_for_mass(c, alpha, 0.1)
        assert abs(0.1 * rho.sum() - 1.0) < 1e-10
        again = density_from_potential_level(c, lam, alpha)
        assert np.max(np.abs(again - rho)) < 1e-12


def test_steady_state_repulsive_interaction_flattens():
    p0 = ModelParams(0.5, HUBER, None)
    prep = ModelParams(0.5, HUBER, builtin_gaussian_w(0.6, 0.5))
    flat = steady_state(prep, -7, 7, 0.01)
    base = steady_state(p0, -7, 7, 0.01)
    assert np.max(flat.values) < np.max(base.values)


# ---------------------------------------------------------------------------
# compressed Fokker-Planck flow
# ---------------------------------------------------------------------------


def test_compressed_fp_conserves_mass_and_positivity():
    p = ModelParams(0.5, HUBER, None)
    cfg = PdeConfig(-6, 6, 0.02, t_final=0.2, record_every=10**9)
    path = solve_compressed_fp(gaussian_density(cfg, 0.5, 0.5), p, cfg)
    final = path.states[-1]
    assert abs(final.dy * final.values.sum() - 1.0) < 1e-10
    assert np.min(final.values) >= 0.0


def test_compressed_fp_fixes_compressed_steady_state():
    # the rank-shifted drift must hold the compressed minimizer stationary
    from rodflow.maps import compress_grid_density

    p = ModelParams(0.5, HUBER, None)
    star = steady_state(p, -7, 7, 0.02)
    mu_star = compress_grid_density(star, 0.5, -7, 0.02, 675)
    cfg = PdeConfig(-7, 6.5, 0.02, t_final=0.5, record_every=10**9)
    path = solve_compressed_fp(mu_star, p, cfg)
    assert wasserstein2(path.states[-1], mu_star) < 1e-3


def test_density_path_validation():
    g = GridDensity(0.0, 0.1, np.ones(10))
    with pytest.raises(ValueError):
        DensityPath(np.array([0.0, 0.0]), (g, g))
    with pytest.raises(ValueError):
        DensityPath(np.array([0.1]), (g,))
