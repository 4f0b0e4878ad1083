"""Stochastic particle simulators and invariant-measure samplers.

Two Euler-Maruyama systems are provided: the compressed system, whose
particles interact only through ranks and may freely cross, and the direct
rod system, which restores the minimum-gap constraint after every step by
pairwise midpoint reflection.  The compressed system is the reference
dynamics; the direct one exists as an independent validation target.

Reproducibility contract: every trajectory draws its noise from a Philox
counter-based stream keyed by (seed, trajectory index), so ensembles are
order-independent and results do not depend on worker count.  Within a
trajectory the normal draw for (step t, particle i) sits at stream position
t*n + i.
"""

from __future__ import annotations

import multiprocessing
import struct
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Optional

import numpy as np
from numpy.random import Generator, Philox

from .maps import GAP_TOL, Side, expand_particles
from .measures import EmpiricalMeasure, GridDensity
from .potentials import ModelParams, coercive_truncation, drift_batch_sorted

__all__ = [
    "SimConfig",
    "ChainConfig",
    "ParticlePath",
    "DivergenceError",
    "ProjectionError",
    "McmcStats",
    "simulate_compressed",
    "simulate_expanded_direct",
    "ensemble_final_states",
    "sample_invariant_mcmc",
    "sample_invariant_mcmc_with_stats",
    "sample_invariant_mcmc_trace",
    "sample_tilted_initial",
    "sample_iid_q",
    "sample_iid_from_measure",
]

# Trajectories per vectorized chunk.  Fixed so that chunk boundaries (and
# hence results) never depend on the worker count.
ENSEMBLE_CHUNK = 1024

_NOISE_BLOCK_FLOATS = 8_000_000  # ~64 MB of f64 per noise block

# Stream tags far above any realistic trajectory index, so samplers never
# collide with trajectory streams under the same seed.
_STREAM_TAG_MCMC = (1 << 48) + 1
_STREAM_TAG_IIDQ = (1 << 48) + 2
_STREAM_TAG_MEASURE = (1 << 48) + 3


class DivergenceError(RuntimeError):
    """The state became non-finite (time step too large)."""


class ProjectionError(RuntimeError):
    """Gap restoration failed to converge (time step too large)."""


@dataclass(frozen=True)
class SimConfig:
    """Particle-simulation parameters."""

    n: int
    dt: float
    t_final: float
    seed: int = 0
    record_every: int = 1
    trajectories: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_final < self.dt:
            raise ValueError("t_final must be >= dt")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.trajectories < 1:
            raise ValueError("trajectories must be >= 1")

    @property
    def steps(self) -> int:
        return max(1, int(round(self.t_final / self.dt)))


@dataclass(frozen=True)
class ParticlePath:
    """Snapshots of a particle trajectory at increasing times."""

    times: np.ndarray
    states: tuple[EmpiricalMeasure, ...]
    side: Side

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.size != len(self.states) or t.size < 1:
            raise ValueError("times and states must have equal nonzero length")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must start at 0 and increase")
        n = self.states[0].n
        if any(s.n != n for s in self.states):
            raise ValueError("all states must have the same particle count")
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", tuple(self.states))

    @property
    def n(self) -> int:
        return self.states[0].n

    def check_admissible(self, alpha: float) -> None:
        """Verify the minimum-gap constraint on every expanded snapshot."""
        g0 = alpha / self.n
        for k, s in enumerate(self.states):
            if s.n > 1 and np.min(np.diff(s.points)) < g0 - GAP_TOL:
                raise ProjectionError(f"snapshot {k} violates the gap constraint")

    def to_csv(self) -> str:
        lines = ["time,particle,position"]
        for t, s in zip(self.times, self.states):
            lines += [
                f"{format(t, '.17g')},{i},{format(p, '.17g')}"
                for i, p in enumerate(s.points)
            ]
        return "\n".join(lines) + "\n"

    def to_binary(self) -> bytes:
        """Columnar dump: magic 'RODP', version, n, snapshot count, then
        little-endian f64 times and positions."""
        head = b"RODP" + struct.pack("<III", 1, self.n, len(self.states))
        times = np.asarray(self.times, dtype="<f8").tobytes()
        pos = np.stack([s.points for s in self.states]).astype("<f8").tobytes()
        return head + times + pos

    @staticmethod
    def from_binary(blob: bytes, side: Side) -> "ParticlePath":
        if blob[:4] != b"RODP":
            raise ValueError("bad magic; not a particle-path dump")
        version, n, count = struct.unpack("<III", blob[4:16])
        if version != 1:
            raise ValueError(f"unsupported dump version {version}")
        off = 16
        times = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += 8 * count
        pos = np.frombuffer(blob, dtype="<f8", count=count * n, offset=off)
        pos = pos.reshape(count, n)
        states = tuple(EmpiricalMeasure(row) for row in pos)
        return ParticlePath(times.astype(float), states, side)


def _trajectory_generator(seed: int, trajectory: int) -> Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, trajectory & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return Generator(Philox(key=key))


def _noise_blocks(
    seed: int, traj0: int, R: int, n: int, steps: int, noise: Optional[np.ndarray]
) -> Iterator[np.ndarray]:
    """Yield (R, block, n) standard-normal blocks, one stream per trajectory."""
    if noise is not None:
        if R != 1:
            raise ValueError("injected noise supports a single trajectory only")
        if noise.shape != (steps, n):
            raise ValueError(f"injected noise must have shape {(steps, n)}")
        yield noise[None, :, :]
        return
    gens = [_trajectory_generator(seed, traj0 + r) for r in range(R)]
    block = min(steps, max(16, _NOISE_BLOCK_FLOATS // max(1, R * n)))
    done = 0
    while done < steps:
        bs = min(block, steps - done)
        out = np.empty((R, bs, n))
        for r, g in enumerate(gens):
            out[r] = g.standard_normal((bs, n))
        done += bs
        yield out


def _project_rods(Y: np.ndarray, g0: float, max_sweeps: int) -> None:
    """Restore gaps >= g0 in place by pairwise mirror reflection.

    Every violated adjacent pair bounces off the contact manifold: the gap
    g is reflected to 2*g0 - g about the pair mean.  Alternating odd/even
    pairs are disjoint, so each half-sweep vectorizes over the batch;
    sweeps repeat until a fixed point.  Mirroring (rather than parking the
    pair at contact) keeps the weak error of the scheme first order in dt;
    the half-tolerance slack stops rounding from re-flagging settled pairs.
    """
    R, n = Y.shape
    if n == 1:
        return
    min_gap = g0 - 0.5 * GAP_TOL
    for _ in range(max_sweeps):
        changed = False
        for parity in (0, 1):
            i = np.arange(parity, n - 1, 2)
            if i.size == 0:
                continue
            yl = Y[:, i]
            yr = Y[:, i + 1]
            gaps = yr - yl
            bad = gaps < min_gap
            if bad.any():
                changed = True
                mid = 0.5 * (yl + yr)
                half_new = 0.5 * (2.0 * g0 - gaps)
                Y[:, i] = np.where(bad, mid - half_new, yl)
                Y[:, i + 1] = np.where(bad, mid + half_new, yr)
        if not changed:
            return
    raise ProjectionError(
        f"gap restoration did not converge in {max_sweeps} sweeps; reduce dt"
    )


def _drift_expanded(Y: np.ndarray, params: ModelParams) -> np.ndarray:
    """Direct rod drift -V'(y_i) - (1/n) sum_j W'(y_i - y_j) on (R, n) rows."""
    b = -np.asarray(params.v_prime(Y), dtype=float)
    if params.W is not None:
        b = b - np.mean(params.w_prime(Y[:, :, None] - Y[:, None, :]), axis=2)
    return b


def _run_batch(
    system: str,
    init_points: np.ndarray,
    params: ModelParams,
    cfg: SimConfig,
    traj0: int,
    R: int,
    record: bool,
    noise: Optional[np.ndarray] = None,
    noise_scale: float = 1.0,
):
    """Advance an (R, n) batch; optionally record snapshots (R = 1 only).

    State rows are kept sorted after every step; this leaves the law of the
    empirical-measure process unchanged (the noise is exchangeable) and
    makes ranks positional.
    """
    n = cfg.n
    if init_points.size != n:
        raise ValueError(f"initial state has {init_points.size} points, expected n = {n}")
    dt = cfg.dt
    steps = cfg.steps
    sqrt_dt = np.sqrt(dt) * noise_scale
    expanded = system == "expanded"
    g0 = params.alpha / n
    max_sweeps = 10 * n

    Z = np.tile(np.sort(init_points), (R, 1)).astype(float)
    if expanded and n > 1 and np.min(np.diff(Z[0])) < g0 - GAP_TOL:
        raise ValueError("initial rod configuration violates the gap constraint")

    snaps: list[np.ndarray] = []
    snap_steps: list[int] = []
    if record:
        snaps.append(Z[0].copy())
        snap_steps.append(0)

    step = 0
    for block in _noise_blocks(cfg.seed, traj0, R, n, steps, noise):
        for t in range(block.shape[1]):
            if expanded:
                b = _drift_expanded(Z, params)
            else:
                b = drift_batch_sorted(Z, params)
            Z += b * dt + sqrt_dt * block[:, t, :]
            Z.sort(axis=1)
            if expanded:
                _project_rods(Z, g0, max_sweeps)
            step += 1
            if not np.isfinite(Z.sum()):
                raise DivergenceError(f"non-finite state at step {step}")
            if record and (step % cfg.record_every == 0 or step == steps):
                snaps.append(Z[0].copy())
                snap_steps.append(step)

    if record:
        times = dt * np.asarray(snap_steps, dtype=float)
        states = tuple(EmpiricalMeasure(s) for s in snaps)
        return ParticlePath(times, states, Side.EXPANDED if expanded else Side.COMPRESSED)
    return Z


def simulate_compressed(
    init: EmpiricalMeasure,
    params: ModelParams,
    cfg: SimConfig,
    trajectory: int = 0,
    noise: Optional[np.ndarray] = None,
    noise_scale: float = 1.0,
) -> ParticlePath:
    """Euler-Maruyama for the rank-interacting compressed system.

    Particles are unconstrained and may cross.  Deterministic given
    (seed, trajectory); ``noise`` injects an explicit (steps, n) increment
    array and ``noise_scale = 0`` gives the zero-noise flow (test hooks).
    """
    return _run_batch(
        "compressed", init.points, params, cfg, trajectory, 1, True, noise, noise_scale
    )


def simulate_expanded_direct(
    init: EmpiricalMeasure,
    params: ModelParams,
    cfg: SimConfig,
    trajectory: int = 0,
    noise: Optional[np.ndarray] = None,
    noise_scale: float = 1.0,
) -> ParticlePath:
    """Euler-Maruyama for the rod system with pairwise-reflection projection.

    After the unconstrained step, every adjacent pair with gap below
    alpha/n is reset to the minimum gap about its midpoint, sweeping until
    admissible.  First order in dt; distribution-level agreement with the
    compressed system is what the verification experiments check.
    """
    return _run_batch(
        "expanded", init.points, params, cfg, trajectory, 1, True, noise, noise_scale
    )


# Worker context for fork-based pools; populated in the parent process so
# that non-picklable potential callables are inherited by the children.
_POOL_CTX: dict = {}


def _pool_chunk(args: tuple[int, int]) -> np.ndarray:
    traj0, R = args
    return _run_batch(
        _POOL_CTX["system"],
        _POOL_CTX["init_points"],
        _POOL_CTX["params"],
        _POOL_CTX["cfg"],
        traj0,
        R,
        record=False,
    )


def ensemble_final_states(
    system: str,
    init: EmpiricalMeasure,
    params: ModelParams,
    cfg: SimConfig,
    workers: int = 1,
) -> np.ndarray:
    """Final states of cfg.trajectories independent runs, shape (R, n).

    Rows are sorted particle positions.  Chunking is fixed, so the result is
    bit-identical for any worker count.
    """
    if system not in ("compressed", "expanded"):
        raise ValueError("system must be 'compressed' or 'expanded'")
    chunks = [
        (t0, min(ENSEMBLE_CHUNK, cfg.trajectories - t0))
        for t0 in range(0, cfg.trajectories, ENSEMBLE_CHUNK)
    ]
    _POOL_CTX.update(system=system, init_points=init.points, params=params, cfg=cfg)
    try:
        if workers > 1 and len(chunks) > 1:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes=min(workers, len(chunks))) as pool:
                parts = pool.map(_pool_chunk, chunks)
        else:
            parts = [_pool_chunk(c) for c in chunks]
    finally:
        _POOL_CTX.clear()
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# Invariant-measure MCMC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainConfig:
    """Single-site Metropolis chain parameters."""

    n_steps: int
    burn_in: int
    proposal_scale: float = 0.5
    seed: int = 0
    adapt: bool = True
    target_acceptance: float = 0.35

    def __post_init__(self):
        if self.n_steps < 1 or self.burn_in < 0:
            raise ValueError("need n_steps >= 1 and burn_in >= 0")
        if self.proposal_scale <= 0:
            raise ValueError("proposal_scale must be positive")


@dataclass(frozen=True)
class McmcStats:
    acceptance_rate: float
    proposal_scale: float
    proposals: int


def _site_energy_delta(
    z: np.ndarray, theta: np.ndarray, phi: Callable, j: int, a2: float
) -> tuple[float, int]:
    """Energy change of moving the value at sorted slot j to a2 (rank-shift
    aware), for separable energies sum phi(z_i + theta_i)."""
    a = z[j]
    if a2 >= a:
        j2 = int(np.searchsorted(z, a2, side="left")) - 1
        mid = z[j + 1 : j2 + 1]
        shift = float(np.sum(phi(mid + theta[j : j2]) - phi(mid + theta[j + 1 : j2 + 1])))
    else:
        j2 = int(np.searchsorted(z, a2, side="left"))
        mid = z[j2:j]
        shift = float(np.sum(phi(mid + theta[j2 + 1 : j + 1]) - phi(mid + theta[j2:j])))
    dE = float(phi(np.array([a2 + theta[j2]]))[0] - phi(np.array([a + theta[j]]))[0]) + shift
    return dE, j2


def _apply_move(z: np.ndarray, j: int, j2: int, a2: float) -> None:
    # Source blocks are copied: slice assignment overlaps in place.
    if j2 >= j:
        z[j:j2] = z[j + 1 : j2 + 1].copy()
    else:
        z[j2 + 1 : j + 1] = z[j2:j].copy()
    z[j2] = a2


def _pair_energy(z: np.ndarray, theta: np.ndarray, params: ModelParams) -> float:
    T = z + theta
    return float(np.sum(params.w_value(T[:, None] - T[None, :]))) / z.size


def _run_single_site_chain(
    phi: Callable,
    params: ModelParams,
    n: int,
    cfg: ChainConfig,
    with_pairs: bool,
    init: np.ndarray,
    trace_thin: int = 0,
) -> tuple[np.ndarray, McmcStats, list[np.ndarray]]:
    """Metropolis random walk on R^n for exchangeable targets exp(-E).

    E(z) = sum_i phi(z_(i) + alpha*i/n) [+ pair term], evaluated on the
    sorted configuration; separable moves use exact incremental deltas,
    pair terms trigger a full recomputation.  With ``trace_thin > 0``,
    every trace_thin-th post-burn-in state is collected.
    """
    rng = _trajectory_generator(cfg.seed, _STREAM_TAG_MCMC)
    z = np.sort(init.astype(float))
    theta = params.alpha * np.arange(n) / n
    scale = cfg.proposal_scale
    total = cfg.burn_in + cfg.n_steps
    accepted_post = 0
    acc_window = 0
    pair_E = _pair_energy(z, theta, params) if with_pairs else 0.0
    trace: list[np.ndarray] = []

    for k in range(total):
        j = int(rng.integers(n))
        a2 = z[j] + scale * rng.standard_normal()
        dE, j2 = _site_energy_delta(z, theta, phi, j, a2)
        if with_pairs:
            z_new = z.copy()
            _apply_move(z_new, j, j2, a2)
            pair_new = _pair_energy(z_new, theta, params)
            dE += pair_new - pair_E
        if dE <= 0 or rng.random() < np.exp(-dE):
            _apply_move(z, j, j2, a2)
            if with_pairs:
                pair_E = pair_new
            if k >= cfg.burn_in:
                accepted_post += 1
            else:
                acc_window += 1
        if cfg.adapt and k < cfg.burn_in and (k + 1) % 100 == 0:
            rate = acc_window / 100.0
            scale = float(np.clip(scale * np.exp(0.6 * (rate - cfg.target_acceptance)), 1e-6, 1e6))
            acc_window = 0
        if trace_thin and k >= cfg.burn_in and (k - cfg.burn_in) % trace_thin == 0:
            trace.append(z.copy())

    rate = accepted_post / cfg.n_steps
    if not (0.05 <= rate <= 0.95):
        warnings.warn(
            f"MCMC acceptance rate {rate:.3f} outside [0.05, 0.95] after adaptation",
            RuntimeWarning,
        )
    return z, McmcStats(rate, scale, total), trace


def _quantile_init(phi: Callable, n: int, lo: float, hi: float) -> np.ndarray:
    """Deterministic quantile start from the single-particle law ~ exp(-phi)."""
    x = np.linspace(lo, hi, 8192)
    w = np.exp(-(phi(x) - np.min(phi(x))))
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    q = (np.arange(n) + 0.5) / n
    return np.interp(q, cdf, x)


def _truncation_or_raise(params: ModelParams) -> float:
    L = coercive_truncation(params)
    if L is None:
        raise ValueError("sampler needs a coercive on-site potential")
    return L


def sample_invariant_mcmc_with_stats(
    params: ModelParams, n: int, chain_cfg: ChainConfig
) -> tuple[EmpiricalMeasure, McmcStats]:
    """As :func:`sample_invariant_mcmc` but also returns chain statistics."""
    L = _truncation_or_raise(params)
    phi = lambda y: 2.0 * np.asarray(params.v_value(y), dtype=float)
    init = _quantile_init(phi, n, -L, L)
    z, stats, _ = _run_single_site_chain(phi, params, n, chain_cfg, params.W is not None, init)
    return EmpiricalMeasure(z), stats


def sample_invariant_mcmc_trace(
    params: ModelParams, n: int, chain_cfg: ChainConfig, thin: int
) -> np.ndarray:
    """Thinned post-burn-in states of the stationary chain, shape (K, n).

    Diagnostic companion to :func:`sample_invariant_mcmc` for marginal and
    mixing checks.
    """
    L = _truncation_or_raise(params)
    phi = lambda y: 2.0 * np.asarray(params.v_value(y), dtype=float)
    init = _quantile_init(phi, n, -L, L)
    _, _, trace = _run_single_site_chain(
        phi, params, n, chain_cfg, params.W is not None, init, trace_thin=thin
    )
    return np.stack(trace)


def sample_invariant_mcmc(params: ModelParams, n: int, chain_cfg: ChainConfig) -> EmpiricalMeasure:
    """Draw one n-particle state from the stationary law, in compressed
    coordinates.

    Target density on R^n: exp[-2 sum_i V(T x_i) - (1/n) sum_ij W(T x_i - T x_j)],
    where T shifts each particle by alpha times its rank fraction.  Rank
    changes are handled by re-inserting the proposed coordinate in sorted
    order; acceptance uses exact log-density differences.
    """
    return sample_invariant_mcmc_with_stats(params, n, chain_cfg)[0]


def sample_tilted_initial(
    params: ModelParams,
    f: Optional[Callable],
    n: int,
    chain_cfg: ChainConfig,
) -> EmpiricalMeasure:
    """Sample the tilted interaction-free stationary law and expand it.

    Target: exp[-sum_i f(T x_i) - 2 sum_i V(T x_i)]; the returned measure is
    the rod-side configuration.
    """
    L = _truncation_or_raise(params)
    if f is None:
        phi = lambda y: 2.0 * np.asarray(params.v_value(y), dtype=float)
    else:
        phi = lambda y: 2.0 * np.asarray(params.v_value(y), dtype=float) + np.asarray(
            f(y), dtype=float
        )
    init = _quantile_init(phi, n, -L, L)
    z, _, _ = _run_single_site_chain(phi, params, n, chain_cfg, False, init)
    return expand_particles(EmpiricalMeasure(z), params.alpha)


def sample_iid_q(
    nu: GridDensity,
    params: ModelParams,
    n: int,
    seed: int,
    domain: Optional[tuple[float, float]] = None,
    quad_points: int = 20001,
) -> EmpiricalMeasure:
    """n i.i.d. draws from the reference density ~ exp(-2 V(T_nu x)).

    Inverse-CDF sampling on a quadrature grid; the truncation comes from the
    coercivity constants of V unless an explicit domain is given.
    """
    from .maps import t_mu

    if domain is None:
        L = _truncation_or_raise(params)
        lo, hi = min(-L, nu.left - 1.0), max(L, nu.right + 1.0)
    else:
        lo, hi = domain
    x = np.linspace(lo, hi, quad_points)
    logw = -2.0 * np.asarray(params.v_value(t_mu(nu, x, params.alpha)), dtype=float)
    w = np.exp(logw - np.max(logw))
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(x))))
    cdf /= cdf[-1]
    u = _trajectory_generator(seed, _STREAM_TAG_IIDQ).random(n)
    return EmpiricalMeasure(np.interp(u, cdf, x))


def sample_iid_from_measure(mu, n: int, seed: int, M: int = 8192) -> EmpiricalMeasure:
    """n i.i.d. draws from an arbitrary measure via its quantile function."""
    from .measures import icdf_of

    X = icdf_of(mu, M)
    u = _trajectory_generator(seed, _STREAM_TAG_MEASURE).random(n)
    m = (np.floor(u * M) + 0.5) / M
    return EmpiricalMeasure(np.interp(m, X.m_grid, X.x_values))
