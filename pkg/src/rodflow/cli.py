"""Experiment runner: named verification experiments driven by config files.

Usage::

    rodflow <subcommand> --config <path> [--seed N] [--out DIR] [--threads K]

Config files are flat ``section.key = value`` text (one key per line, ``#``
comments).  Every experiment writes ``report.json`` (embedding the fully
resolved configuration) plus CSV curves into the output directory, and exits
0 on pass, 1 on a threshold failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.random import Generator, Philox

from . import functionals as fn
from . import maps, measures, pde, potentials, simulate

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict:
    """Parse flat key/value config text into a dict with typed values."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        out[key] = _parse_value(value)
    if not out:
        raise ConfigError("config file defines no keys")
    return out


def _parse_value(value: str):
    if "," in value:
        return [_parse_scalar(v.strip()) for v in value.split(",") if v.strip()]
    return _parse_scalar(value)


def _parse_scalar(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value


def _as_list(v) -> list:
    return v if isinstance(v, list) else [v]


def build_model(cfg: dict) -> potentials.ModelParams:
    alpha = float(cfg.get("model.alpha", 0.5))
    vkind = cfg.get("model.v", "huber")
    if vkind == "huber":
        V = potentials.builtin_huber_v(float(cfg.get("model.v.c", 2.0)), float(cfg.get("model.v.s", 0.5)))
    elif vkind == "none":
        V = None
    elif isinstance(vkind, str) and vkind.startswith("table:"):
        path = Path(vkind.split(":", 1)[1])
        V = potentials.table_potential(
            path.read_text(),
            kind="onsite",
            lipschitz_bound=float(cfg.get("model.v.lipschitz", 10.0)),
            coercivity=(float(cfg.get("model.v.c1", 0.5)), float(cfg.get("model.v.c2", 1.0))),
        )
    else:
        raise ConfigError(f"unknown on-site potential family {vkind!r}")
    wkind = cfg.get("model.w", "none")
    if wkind == "gaussian":
        W = potentials.builtin_gaussian_w(
            float(cfg.get("model.w.w0", 0.3)), float(cfg.get("model.w.sigma", 0.5))
        )
    elif wkind == "none":
        W = None
    else:
        raise ConfigError(f"unknown interaction family {wkind!r}")
    return potentials.ModelParams(alpha, V, W)


def build_tilt(cfg: dict) -> Optional[Callable]:
    fam = cfg.get("model.f", "none")
    if fam == "none":
        return None
    if fam == "tanh":
        kappa = float(cfg.get("model.f.kappa", 0.5))
        return lambda y: kappa * np.tanh(np.asarray(y, dtype=float))
    raise ConfigError(f"unknown tilt family {fam!r}")


def build_pde_config(cfg: dict, t_final_key: str = "pde.t_final") -> pde.PdeConfig:
    dt = cfg.get("pde.dt")
    return pde.PdeConfig(
        left=float(cfg.get("pde.left", -7.0)),
        right=float(cfg.get("pde.right", 7.0)),
        dy=float(cfg.get("pde.dy", 0.01)),
        t_final=float(cfg.get(t_final_key, 0.2)),
        dt=float(dt) if dt is not None else None,
        cfl=float(cfg.get("pde.cfl", 0.4)),
        record_every=int(cfg.get("pde.record_every", 10**9)),
    )


def initial_density(cfg: dict, grid: pde.PdeConfig) -> measures.GridDensity:
    kind = cfg.get("init.kind", "gaussian")
    yc = grid.centers()
    if kind == "gaussian":
        mean = float(cfg.get("init.mean", 0.8))
        sigma = float(cfg.get("init.sigma", 0.5))
        vals = np.exp(-((yc - mean) ** 2) / (2 * sigma * sigma))
    elif kind == "uniform":
        a = float(cfg.get("init.left", 0.0))
        b = float(cfg.get("init.right", 1.0))
        vals = ((yc > a) & (yc < b)).astype(float)
    else:
        raise ConfigError(f"unknown init.kind {kind!r}")
    return measures.GridDensity(grid.left, grid.dy, vals)


def _write_report(outdir: Path, experiment: str, cfg: dict, results: dict, passed: bool) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    report = {
        "experiment": experiment,
        "pass": bool(passed),
        "config": {k: cfg[k] for k in sorted(cfg)},
        "results": results,
    }
    (outdir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _write_csv(outdir: Path, name: str, header: str, rows: list) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    lines = [header]
    lines += [",".join(format(v, ".17g") if isinstance(v, float) else str(v) for v in row) for row in rows]
    (outdir / name).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def cmd_verify_isometry(cfg: dict, outdir: Path) -> int:
    """Check that particle and density expansion preserve transport distance."""
    seed = int(cfg.get("seed", 0))
    tol = float(cfg.get("isometry.tolerance", 1e-10))
    n_pairs = int(cfg.get("isometry.pairs", 200))
    alphas = [float(a) for a in _as_list(cfg.get("isometry.alphas", [0.1, 0.5, 0.9]))]
    ns = [int(n) for n in _as_list(cfg.get("isometry.ns", [1, 2, 16, 256, 1024]))]
    M = int(cfg.get("isometry.mass_grid", measures.DEFAULT_MASS_GRID))
    rng = Generator(Philox(key=np.array([seed, 0x150], dtype=np.uint64)))

    max_disc = 0.0
    max_cont = 0.0
    bound_violations = 0
    rows = []
    for k in range(n_pairs):
        alpha = alphas[k % len(alphas)]
        n = ns[k % len(ns)]
        a = measures.EmpiricalMeasure(rng.normal(size=n))
        b = measures.EmpiricalMeasure(rng.normal(loc=rng.normal(), size=n))
        d0 = measures.wasserstein2(a, b)
        d1 = measures.wasserstein2(
            maps.expand_particles(a, alpha), maps.expand_particles(b, alpha)
        )
        dev = abs(d1 - d0)
        max_disc = max(max_disc, dev)

        ga = _random_grid_density(rng)
        gb = _random_grid_density(rng)
        c0 = measures.wasserstein2(measures.icdf_of(ga, M), measures.icdf_of(gb, M))
        c1 = measures.wasserstein2(
            maps.expand_density(ga, alpha, M), maps.expand_density(gb, alpha, M)
        )
        cdev = abs(c1 - c0)
        max_cont = max(max_cont, cdev)

        # discrete-continuous cross bound: |W2(A mu, A_n mu_n) - W2(mu, mu_n)| <= alpha/n (+ quadrature)
        x0 = measures.wasserstein2(measures.icdf_of(ga, M), measures.icdf_of(a, M))
        x1 = measures.wasserstein2(
            maps.expand_density(ga, alpha, M), measures.icdf_of(maps.expand_particles(a, alpha), M)
        )
        gap = abs(x1 - x0)
        bound = alpha / n + 3.0 / M
        if gap > bound:
            bound_violations += 1
        rows.append((k, alpha, n, dev, cdev, gap, bound))

    passed = max_disc < tol and max_cont <= 3.0 / M and bound_violations == 0
    _write_csv(outdir, "isometry.csv", "trial,alpha,n,discrete_dev,continuous_dev,cross_gap,cross_bound", rows)
    _write_report(
        outdir,
        "verify-isometry",
        cfg,
        {
            "max_discrete_deviation": max_disc,
            "max_continuous_deviation": max_cont,
            "continuous_bound": 3.0 / M,
            "cross_bound_violations": bound_violations,
            "tolerance": tol,
        },
        passed,
    )
    return EXIT_PASS if passed else EXIT_FAIL


def _random_grid_density(rng: Generator) -> measures.GridDensity:
    n = int(rng.integers(32, 200))
    dy = 4.0 / n
    yc = -2.0 + (np.arange(n) + 0.5) * dy
    m1, m2 = rng.normal(scale=0.6, size=2)
    s1, s2 = 0.3 + rng.random(2)
    vals = np.exp(-((yc - m1) ** 2) / (2 * s1 * s1)) + rng.random() * np.exp(
        -((yc - m2) ** 2) / (2 * s2 * s2)
    )
    return measures.GridDensity(-2.0, dy, vals)


def cmd_verify_mapping(cfg: dict, outdir: Path, threads: int) -> int:
    """Distributional equivalence of the direct rod system and the expanded
    compressed system, tested on moment observables."""
    from scipy.special import ndtri

    params = build_model(cfg)
    seed = int(cfg.get("seed", 0))
    n = int(cfg.get("sim.n", 10))
    dt = float(cfg.get("sim.dt", 1e-3))
    T = float(cfg.get("sim.t_final", 0.5))
    R = int(cfg.get("sim.trajectories", 2000))
    alpha_wrong = float(cfg.get("mapping.alpha_mismatch", min(0.99, params.alpha + 0.3)))
    level_const = float(cfg.get("mapping.ks_level_constant", 1.628))  # 1% level

    x0 = measures.EmpiricalMeasure(0.5 * ndtri((np.arange(n) + 0.5) / n))
    y0 = maps.expand_particles(x0, params.alpha)
    cfg_c = simulate.SimConfig(n=n, dt=dt, t_final=T, seed=seed + 1, record_every=10**9, trajectories=R)
    cfg_e = simulate.SimConfig(n=n, dt=dt, t_final=T, seed=seed + 2, record_every=10**9, trajectories=R)
    Zc = simulate.ensemble_final_states("compressed", x0, params, cfg_c, workers=threads)
    Ye = simulate.ensemble_final_states("expanded", y0, params, cfg_e, workers=threads)

    Yc = Zc + params.alpha * np.arange(n) / n
    obs = {
        "m1": (Yc.mean(axis=1), Ye.mean(axis=1)),
        "m2": ((Yc**2).mean(axis=1), (Ye**2).mean(axis=1)),
    }
    threshold = level_const * np.sqrt(2.0 / R)
    ks = {
        name: measures.ks_distance(
            measures.EmpiricalMeasure(a), measures.EmpiricalMeasure(b)
        )
        for name, (a, b) in obs.items()
    }
    Yw = Zc + alpha_wrong * np.arange(n) / n
    ks_control = measures.ks_distance(
        measures.EmpiricalMeasure(Yw.mean(axis=1)), measures.EmpiricalMeasure(obs["m1"][1])
    )
    passed = all(v < threshold for v in ks.values()) and ks_control > threshold

    rows = [
        (i, obs["m1"][0][i], obs["m1"][1][i], obs["m2"][0][i], obs["m2"][1][i])
        for i in range(R)
    ]
    _write_csv(outdir, "moments.csv", "trajectory,m1_compressed,m1_direct,m2_compressed,m2_direct", rows)
    _write_report(
        outdir,
        "verify-mapping",
        cfg,
        {
            "ks": ks,
            "ks_threshold": threshold,
            "ks_negative_control": ks_control,
            "trajectories": R,
        },
        passed,
    )
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_continuum_limit(cfg: dict, outdir: Path) -> int:
    """Measure the transport distance between particle empirical measures and
    the limit equation over a particle-count sweep."""
    params = build_model(cfg)
    seed = int(cfg.get("seed", 0))
    grid = build_pde_config(cfg)
    rho0 = initial_density(cfg, grid)
    ns = [int(v) for v in _as_list(cfg.get("limit.ns", [100, 400, 1600]))]
    n_seeds = int(cfg.get("limit.seeds", 20))
    dt = float(cfg.get("sim.dt", 0.01))
    T = grid.t_final
    final_threshold = float(cfg.get("limit.final_threshold", 0.05))

    path = pde.solve_limit_pde(rho0, params, grid)
    rho_T = path.states[-1]

    mu0 = maps.compress_grid_density(
        rho0, params.alpha, grid.left, grid.dy, max(2, int(round((grid.right - params.alpha - grid.left) / grid.dy)))
    )
    means = []
    rows = []
    for n in ns:
        dists = []
        for s in range(n_seeds):
            init = simulate.sample_iid_from_measure(mu0, n, seed=seed + 1000 * s + n)
            scfg = simulate.SimConfig(n=n, dt=dt, t_final=T, seed=seed + s, record_every=10**9)
            p = simulate.simulate_compressed(init, params, scfg, trajectory=s)
            emp = maps.expand_particles(p.states[-1], params.alpha)
            dists.append(measures.wasserstein2(emp, rho_T))
        means.append(float(np.mean(dists)))
        rows.append((n, means[-1], float(np.min(dists)), float(np.max(dists))))

    decreasing = all(means[i] > means[i + 1] for i in range(len(means) - 1))
    passed = decreasing and means[-1] < final_threshold
    _write_csv(outdir, "continuum.csv", "n,mean_w2,min_w2,max_w2", rows)
    _write_report(
        outdir,
        "continuum-limit",
        cfg,
        {"ns": ns, "mean_w2": means, "decreasing": decreasing, "final_threshold": final_threshold},
        passed,
    )
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_invariant_ldp(cfg: dict, outdir: Path) -> int:
    """Stationary-sampler histogram against the free-energy minimizer."""
    params = build_model(cfg)
    seed = int(cfg.get("seed", 0))
    n = int(cfg.get("mcmc.n", 1000))
    sweeps = int(cfg.get("mcmc.sweeps", 600))
    burn = int(cfg.get("mcmc.burn_sweeps", 200))
    scale = float(cfg.get("mcmc.proposal_scale", 0.4))
    threshold = float(cfg.get("invariant.w2_threshold", 0.05))
    left = float(cfg.get("pde.left", -6.0))
    right = float(cfg.get("pde.right", 6.5))
    dy = float(cfg.get("pde.dy", 0.005))
    hist_dy = float(cfg.get("invariant.hist_dy", 0.1))

    chain = simulate.ChainConfig(n_steps=sweeps * n, burn_in=burn * n, proposal_scale=scale, seed=seed)
    sample, stats = simulate.sample_invariant_mcmc_with_stats(params, n, chain)
    expanded = maps.expand_particles(sample, params.alpha)
    star = pde.steady_state(params, left, right, dy)
    count = int(round((right - left) / hist_dy))
    hist = measures.histogram(expanded, left, hist_dy, count)
    d = measures.wasserstein2(hist, star)
    passed = d < threshold
    rows = list(zip(star.centers().tolist(), star.values.tolist()))
    _write_csv(outdir, "steady_state.csv", "y,rho_star", rows)
    _write_csv(
        outdir,
        "histogram.csv",
        "y,rho_hist",
        list(zip(hist.centers().tolist(), hist.values.tolist())),
    )
    _write_report(
        outdir,
        "invariant-ldp",
        cfg,
        {
            "w2": d,
            "threshold": threshold,
            "acceptance_rate": stats.acceptance_rate,
            "particles": n,
        },
        passed,
    )
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_edp_check(cfg: dict, outdir: Path) -> int:
    """Gradient-flow defect of a limit-equation solve."""
    params = build_model(cfg)
    grid = build_pde_config(cfg)
    rho0 = initial_density(cfg, grid)
    rel_threshold = float(cfg.get("edp.relative_threshold", 0.05))
    fe_tol = float(cfg.get("edp.fe_monotonicity_tol", 1e-6))

    path = pde.solve_limit_pde(rho0, params, grid)
    rep = fn.edp_residual(path, params)
    fes = [fn.free_energy(s, params).total_unnormalized for s in path.states]
    speeds = fn.speed_samples(path)
    slopes = [fn.metric_slope(s, params) for s in path.states]
    monotone = bool(np.max(np.diff(fes)) <= fe_tol)
    passed = abs(rep.relative_residual) < rel_threshold and monotone
    rows = [
        (float(t), fes[i], float(speeds[i] ** 2), float(slopes[i] ** 2))
        for i, t in enumerate(path.times)
    ]
    _write_csv(outdir, "edp.csv", "time,free_energy,speed_sq,slope_sq", rows)
    _write_report(
        outdir,
        "edp-check",
        cfg,
        {
            "relative_residual": rep.relative_residual,
            "absolute_residual": rep.edp_residual,
            "free_energy_monotone": monotone,
            "threshold": rel_threshold,
        },
        passed,
    )
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_bruna_chapman(cfg: dict, outdir: Path) -> int:
    """Order of the small-volume-fraction approximation."""
    base = build_model(cfg)
    if base.W is not None:
        raise ConfigError("the small-alpha comparison requires model.w = none")
    grid = build_pde_config(cfg)
    rho0 = initial_density(cfg, grid)
    alphas = [float(a) for a in _as_list(cfg.get("bc.alphas", [0.025, 0.05, 0.1]))]
    factor = float(cfg.get("bc.ratio_factor", 2.0))

    ratios = []
    rows = []
    for alpha in alphas:
        params = potentials.ModelParams(alpha, base.V, None)
        full = pde.solve_limit_pde(rho0, params, grid)
        approx = pde.solve_bruna_chapman(rho0, params, grid)
        gap = float(np.max(np.abs(full.states[-1].values - approx.states[-1].values)))
        ratios.append(gap / alpha**2)
        rows.append((alpha, gap, ratios[-1]))
    spread = max(ratios) / min(ratios)
    passed = spread < factor
    _write_csv(outdir, "bruna_chapman.csv", "alpha,sup_gap,gap_over_alpha_sq", rows)
    _write_report(
        outdir,
        "bruna-chapman",
        cfg,
        {"alphas": alphas, "ratios": ratios, "spread": spread, "factor": factor},
        passed,
    )
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_steady_state(cfg: dict, outdir: Path) -> int:
    """Free-energy minimizer and its first-order-condition residual."""
    params = build_model(cfg)
    left = float(cfg.get("pde.left", -7.0))
    right = float(cfg.get("pde.right", 7.0))
    dy = float(cfg.get("pde.dy", 0.005))
    xi_tol = float(cfg.get("steady.xi_tolerance", 1e-6))

    star = pde.steady_state(params, left, right, dy)
    field = fn.xi_field(star, params)
    mask = field.support & (star.values > fn.SLOPE_FLOOR)
    xi_resid = float(np.nanmax(np.abs(field.values[mask] - np.nanmedian(field.values[mask]))))
    fe = fn.free_energy(star, params)
    passed = xi_resid < xi_tol
    _write_csv(
        outdir,
        "steady_state.csv",
        "y,rho_star",
        list(zip(star.centers().tolist(), star.values.tolist())),
    )
    _write_report(
        outdir,
        "steady-state",
        cfg,
        {
            "xi_residual": xi_resid,
            "xi_tolerance": xi_tol,
            "free_energy_unnormalized": fe.total_unnormalized,
            "max_density": float(np.max(star.values)),
        },
        passed,
    )
    return EXIT_PASS if passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_EXPERIMENTS = (
    "verify-isometry",
    "verify-mapping",
    "continuum-limit",
    "invariant-ldp",
    "edp-check",
    "bruna-chapman",
    "steady-state",
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rodflow", description=__doc__)
    parser.add_argument("experiment", choices=_EXPERIMENTS)
    parser.add_argument("--config", required=True, help="path to the experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for ensembles")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0,) else 0

    try:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise ConfigError(f"config file not found: {cfg_path}")
        cfg = parse_config(cfg_path.read_text())
        if args.seed is not None:
            cfg["seed"] = args.seed
        outdir = Path(args.out if args.out is not None else cfg.get("out.dir", "rodflow_out"))

        if args.experiment == "verify-isometry":
            return cmd_verify_isometry(cfg, outdir)
        if args.experiment == "verify-mapping":
            return cmd_verify_mapping(cfg, outdir, args.threads)
        if args.experiment == "continuum-limit":
            return cmd_continuum_limit(cfg, outdir)
        if args.experiment == "invariant-ldp":
            return cmd_invariant_ldp(cfg, outdir)
        if args.experiment == "edp-check":
            return cmd_edp_check(cfg, outdir)
        if args.experiment == "bruna-chapman":
            return cmd_bruna_chapman(cfg, outdir)
        if args.experiment == "steady-state":
            return cmd_steady_state(cfg, outdir)
        return EXIT_USAGE
    except (ConfigError, OSError, ValueError) as exc:
        print(f"rodflow: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
