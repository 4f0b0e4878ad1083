"""Scalar functionals of rod densities and of density paths.

Free energies split into an entropy-with-excluded-volume part, an on-site
part, and an interaction part; every functional is reported unnormalized,
with the additive constants that pin the minimum to zero computed once per
model by the steady-state solver (see :func:`calibrate`).

Path functionals combine the transport speed of the curve (central
differences of the quadratic transport distance) with the descent slope of
the free energy; their sum against the energy drop is the gradient-flow
defect, and together with a tilted initial term it assembles the pathwise
large-deviation cost.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy.integrate import simpson

from .maps import compress_grid_density, t_mu
from .measures import DEFAULT_MASS_GRID, GridDensity, icdf_of, wasserstein2
from .pde import DensityPath, convolve_on_grid, solve_level_for_mass
from .potentials import ModelParams, coercive_truncation

__all__ = [
    "FunctionalReport",
    "PathReport",
    "XiField",
    "Calibration",
    "TiltCalibration",
    "TruncationError",
    "SupportMismatchError",
    "free_energy",
    "free_energy_compressed",
    "tilted_free_energy",
    "relative_entropy",
    "gamma_z",
    "xi_field",
    "metric_slope",
    "metric_derivative",
    "speed_samples",
    "edp_residual",
    "rate_functional_path",
    "recover_control",
    "calibrate",
    "calibrate_tilt",
]

SUPPORT_FLOOR = 1e-12  # cells below this density are off-support
SLOPE_FLOOR = 1e-8  # cells below this are excluded from slope integrals
MIN_PATH_SNAPSHOTS = 20

_CEILING_TOL = 1e-12


class TruncationError(RuntimeError):
    """Quadrature truncation or refinement audit failed."""


class SupportMismatchError(ValueError):
    """Snapshots of a path do not share a common density support."""


@dataclass(frozen=True)
class FunctionalReport:
    """Itemized value of a free-energy-type functional."""

    entropy_term: float
    onsite_term: float
    interaction_term: float
    total_unnormalized: float
    normalization: Optional[float] = None
    finite: bool = True

    @property
    def normalized(self) -> float:
        if self.normalization is None:
            raise ValueError("no normalization constant attached")
        return self.total_unnormalized + self.normalization

    def to_json(self) -> str:
        return json.dumps(
            {
                "entropy_term": self.entropy_term,
                "onsite_term": self.onsite_term,
                "interaction_term": self.interaction_term,
                "total_unnormalized": self.total_unnormalized,
                "normalization": self.normalization,
                "finite": self.finite,
            }
        )

    @staticmethod
    def csv_header() -> str:
        return "entropy_term,onsite_term,interaction_term,total_unnormalized,normalization,finite"

    def csv_row(self) -> str:
        norm = "" if self.normalization is None else format(self.normalization, ".17g")
        return (
            f"{self.entropy_term:.17g},{self.onsite_term:.17g},"
            f"{self.interaction_term:.17g},{self.total_unnormalized:.17g},"
            f"{norm},{int(self.finite)}"
        )


@dataclass(frozen=True)
class PathReport:
    """Energy-dissipation bookkeeping of a density path."""

    fe_initial: float
    fe_final: float
    action_velocity: float
    action_slope: float
    edp_residual: float
    rate_value: Optional[float] = None
    tilted_initial: Optional[float] = None

    @property
    def relative_residual(self) -> float:
        drop = self.fe_initial - self.fe_final
        return self.edp_residual / max(abs(drop), 1e-300)

    def to_json(self) -> str:
        return json.dumps(
            {
                "fe_initial": self.fe_initial,
                "fe_final": self.fe_final,
                "action_velocity": self.action_velocity,
                "action_slope": self.action_slope,
                "edp_residual": self.edp_residual,
                "relative_residual": self.relative_residual,
                "rate_value": self.rate_value,
                "tilted_initial": self.tilted_initial,
            }
        )


@dataclass(frozen=True)
class XiField:
    """First variation of the free energy on the density support."""

    values: np.ndarray  # NaN off support
    gradient: np.ndarray  # NaN off support
    support: np.ndarray  # boolean mask


def _grid_quad(values: np.ndarray, dy: float) -> float:
    return dy * float(np.sum(values))


def _entropy_excluded_volume(rho: np.ndarray, alpha: float, dy: float) -> tuple[float, bool]:
    """Half integral of rho log(rho/(1 - alpha rho)); +inf at the ceiling."""
    if alpha > 0 and np.any(rho >= 1.0 / alpha - _CEILING_TOL):
        return math.inf, False
    pos = rho > 0
    r = rho[pos]
    val = 0.5 * _grid_quad(r * (np.log(r) - np.log1p(-alpha * r)), dy)
    return val, True


def free_energy(
    rho: GridDensity, params: ModelParams, calibration: Optional["Calibration"] = None
) -> FunctionalReport:
    """Rod free energy: excluded-volume entropy + on-site + interaction.

    Empty cells contribute zero entropy; any cell at the packing ceiling
    1/alpha makes the value +inf, flagged rather than raised.
    """
    dy = rho.dy
    vals = rho.values
    entropy, finite = _entropy_excluded_volume(vals, params.alpha, dy)
    onsite = _grid_quad(vals * np.asarray(params.v_value(rho.centers()), dtype=float), dy)
    if params.W is not None:
        conv = convolve_on_grid(params.w_value, vals, dy)
        interaction = 0.5 * _grid_quad(vals * conv, dy)
    else:
        interaction = 0.0
    total = entropy + onsite + interaction if finite else math.inf
    norm = calibration.c_free_energy if calibration is not None else None
    return FunctionalReport(entropy, onsite, interaction, total, norm, finite)


def free_energy_compressed(mu: GridDensity, params: ModelParams) -> FunctionalReport:
    """Free energy in compressed coordinates: plain Boltzmann entropy plus
    potentials evaluated at the rank-shifted positions T x."""
    dy = mu.dy
    vals = mu.values
    pos = vals > 0
    entropy = 0.5 * _grid_quad(vals[pos] * np.log(vals[pos]), dy)
    Tc = _t_at_centers(mu, params.alpha)
    onsite = _grid_quad(vals * np.asarray(params.v_value(Tc), dtype=float), dy)
    if params.W is not None:
        pair = np.asarray(params.w_value(Tc[:, None] - Tc[None, :]), dtype=float)
        interaction = 0.5 * dy * dy * float(vals @ pair @ vals)
    else:
        interaction = 0.0
    return FunctionalReport(entropy, onsite, interaction, entropy + onsite + interaction)


def _t_at_centers(mu: GridDensity, alpha: float) -> np.ndarray:
    """T-image of the cell centers under the measure's own CDF."""
    f_center = mu.edge_masses()[:-1] + 0.5 * mu.dy * mu.values
    return mu.centers() + alpha * np.minimum(f_center, 1.0)


def tilted_free_energy(
    rho: GridDensity,
    params: ModelParams,
    f: Optional[Callable],
    calibration: Optional["TiltCalibration"] = None,
) -> FunctionalReport:
    """Interaction-free free energy with the tilt folded into the on-site
    term: entropy + integral of (V + f/2) rho."""
    dy = rho.dy
    vals = rho.values
    entropy, finite = _entropy_excluded_volume(vals, params.alpha, dy)
    yc = rho.centers()
    eff = np.asarray(params.v_value(yc), dtype=float)
    if f is not None:
        eff = eff + 0.5 * np.asarray(f(yc), dtype=float)
    onsite = _grid_quad(vals * eff, dy)
    total = entropy + onsite if finite else math.inf
    norm = calibration.c_tilt if calibration is not None else None
    return FunctionalReport(entropy, onsite, 0.0, total, norm, finite)


def relative_entropy(mu: GridDensity, nu: GridDensity) -> float:
    """Integral of mu log(mu/nu) on a shared grid; +inf when mu loads cells
    where nu vanishes."""
    if mu.count != nu.count or abs(mu.left - nu.left) > 1e-12 or abs(mu.dy - nu.dy) > 1e-15:
        raise ValueError("relative entropy requires a shared grid")
    m, n = mu.values, nu.values
    if np.any((m > 0) & (n <= 0)):
        return math.inf
    pos = m > 0
    return mu.dy * float(np.sum(m[pos] * (np.log(m[pos]) - np.log(n[pos]))))


def gamma_z(
    nu: GridDensity,
    params: ModelParams,
    logz_tol: float = 1e-9,
    tail_tol: float = 1e-12,
    domain: Optional[tuple[float, float]] = None,
) -> tuple[float, float]:
    """Log-partition of the reference density exp(-2 V(T_nu x)) and the
    uncalibrated entropy correction -log Z.

    Quadrature on a coercivity-derived truncation (or an explicit one for
    potential-free models), refined until the log-partition settles below
    ``logz_tol``; raises :class:`TruncationError` if the tails or the
    refinement fail their audits.
    """
    if params.V is None and domain is None:
        raise TruncationError(
            "reference measure needs a coercive on-site potential or an explicit domain"
        )
    if domain is not None:
        lo, hi = float(domain[0]), float(domain[1])
        fixed_domain = True
        c1 = 1.0
    else:
        L = coercive_truncation(params, tail_tol=1e-16)
        lo = min(-L, nu.left - 1.0)
        hi = max(L, nu.right + 1.0)
        c1 = params.V.coercivity[0]
        fixed_domain = False
    prev = None
    K = 16385
    for _ in range(10):
        x = np.linspace(lo, hi, K)
        logw = -2.0 * np.asarray(params.v_value(t_mu(nu, x, params.alpha)), dtype=float)
        peak = float(np.max(logw))
        w = np.exp(logw - peak)
        Z = float(simpson(w, x=x))
        logZ = peak + float(np.log(Z))
        if not fixed_domain:
            tail = max(w[0], w[-1]) / (2.0 * c1)
            if tail > tail_tol * Z:
                lo -= 2.0
                hi += 2.0
                prev = None
                continue
        if prev is not None and abs(logZ - prev) < logz_tol:
            return logZ, -logZ
        prev = logZ
        K = 2 * K - 1
    raise TruncationError("log-partition quadrature failed its refinement audit")


def xi_field(
    rho: GridDensity, params: ModelParams, support_floor: float = SUPPORT_FLOOR
) -> XiField:
    """First variation log(rho/(1-a rho))/2 + 1/(2(1-a rho)) + V + W*rho and
    its centered spatial derivative on the support.

    One-sided differences are used at the edges of each contiguous support
    run; off-support cells hold NaN.
    """
    vals = rho.values
    alpha = params.alpha
    support = vals > support_floor
    if not np.any(support):
        raise ValueError("density has empty support")
    if alpha > 0 and np.any(vals >= 1.0 / alpha - _CEILING_TOL):
        raise ValueError("density reaches the ceiling 1/alpha")
    xi = np.full(vals.shape, np.nan)
    r = vals[support]
    xi_s = 0.5 * (np.log(r) - np.log1p(-alpha * r)) + 0.5 / (1.0 - alpha * r)
    xi_s = xi_s + np.asarray(params.v_value(rho.centers()), dtype=float)[support]
    if params.W is not None:
        xi_s = xi_s + convolve_on_grid(params.w_value, vals, rho.dy)[support]
    xi[support] = xi_s

    grad = np.full(vals.shape, np.nan)
    for start, stop in _runs(support):
        if stop - start >= 2:
            grad[start:stop] = np.gradient(xi[start:stop], rho.dy, edge_order=1)
    return XiField(xi, grad, support)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Contiguous True runs as half-open index pairs."""
    idx = np.flatnonzero(np.diff(np.concatenate(([0], mask.view(np.int8), [0]))))
    return list(zip(idx[::2], idx[1::2]))


def metric_slope(rho: GridDensity, params: ModelParams) -> float:
    """Descent slope: L2(rho) norm of the xi gradient over the support.

    Cells below ``SLOPE_FLOOR`` carry negligible rho-weight and are
    excluded from the integral.
    """
    field = xi_field(rho, params)
    mask = field.support & (rho.values >= SLOPE_FLOOR) & np.isfinite(field.gradient)
    if not np.any(mask):
        return 0.0
    sq = rho.dy * float(np.sum(rho.values[mask] * field.gradient[mask] ** 2))
    return float(np.sqrt(max(sq, 0.0)))


def metric_derivative(path: DensityPath, t_index: int, M: int = DEFAULT_MASS_GRID) -> float:
    """Transport speed at an interior snapshot by the central difference
    W2(rho_{k+1}, rho_{k-1}) / (t_{k+1} - t_{k-1})."""
    if not 0 < t_index < len(path.states) - 1:
        raise IndexError("metric derivative needs an interior time index")
    dt2 = path.times[t_index + 1] - path.times[t_index - 1]
    return wasserstein2(path.states[t_index + 1], path.states[t_index - 1], M) / dt2


def speed_samples(path: DensityPath, M: int = DEFAULT_MASS_GRID) -> np.ndarray:
    """Transport speed at every snapshot; one-sided at the two ends."""
    K = len(path.states)
    t = path.times
    out = np.empty(K)
    out[0] = wasserstein2(path.states[1], path.states[0], M) / (t[1] - t[0])
    out[-1] = wasserstein2(path.states[-1], path.states[-2], M) / (t[-1] - t[-2])
    for k in range(1, K - 1):
        out[k] = wasserstein2(path.states[k + 1], path.states[k - 1], M) / (t[k + 1] - t[k - 1])
    return out


def edp_residual(
    path: DensityPath,
    params: ModelParams,
    M: int = DEFAULT_MASS_GRID,
    min_snapshots: int = MIN_PATH_SNAPSHOTS,
) -> PathReport:
    """Gradient-flow defect of a path: energy change plus half the time
    integrals of squared speed and squared slope (trapezoid in time).

    Zero (up to discretization) exactly on gradient-flow solutions; the
    normalization constant cancels in the energy difference.
    """
    if len(path.states) < min_snapshots:
        raise ValueError(
            f"path functionals need at least {min_snapshots} snapshots, got {len(path.states)}"
        )
    fes = []
    for s in path.states:
        rep = free_energy(s, params)
        if not rep.finite:
            raise ValueError("free energy is infinite along the path")
        fes.append(rep.total_unnormalized)
    speeds = speed_samples(path, M)
    slopes = np.array([metric_slope(s, params) for s in path.states])
    action_velocity = 0.5 * float(np.trapezoid(speeds**2, path.times))
    action_slope = 0.5 * float(np.trapezoid(slopes**2, path.times))
    residual = fes[-1] - fes[0] + action_velocity + action_slope
    return PathReport(fes[0], fes[-1], action_velocity, action_slope, residual)


def rate_functional_path(
    path: DensityPath,
    params: ModelParams,
    f: Optional[Callable],
    tilt_calibration: "TiltCalibration",
    M: int = DEFAULT_MASS_GRID,
) -> PathReport:
    """Pathwise large-deviation cost: twice the calibrated tilted free
    energy of the initial state plus the gradient-flow defect terms."""
    base = edp_residual(path, params, M)
    tf = tilted_free_energy(path.states[0], params, f, tilt_calibration)
    if not tf.finite:
        return replace(base, rate_value=math.inf, tilted_initial=math.inf)
    tilted0 = tf.normalized
    rate = 2.0 * tilted0 + base.edp_residual
    return replace(base, rate_value=rate, tilted_initial=tilted0)


def recover_control(
    path: DensityPath,
    params: ModelParams,
    support_floor: float = SLOPE_FLOOR,
) -> tuple[np.ndarray, float]:
    """Recover the control field of a compressed-side path and its action.

    The continuity velocity is v = -(d/dt F)/mu per cell; the control is
    u = v + (d/dx mu)/(2 mu) - b(x, mu_t).  Returns (u, action) with u NaN
    off the common support and action = half the space-time integral of
    u^2 mu.  Snapshots whose support differs materially from the common one
    raise :class:`SupportMismatchError`.
    """
    K = len(path.states)
    if K < 3:
        raise ValueError("control recovery needs at least 3 snapshots")
    g0 = path.states[0]
    dy = g0.dy
    yc = g0.centers()
    mu = np.stack([s.values for s in path.states])
    common = np.all(mu > support_floor, axis=0)
    if not np.any(common):
        raise SupportMismatchError("no common support across snapshots")
    outside = dy * np.sum(np.where(common[None, :], 0.0, mu), axis=1)
    if np.max(outside) > 1e-2:
        raise SupportMismatchError(
            f"snapshot carries mass {np.max(outside):.3e} outside the common support"
        )

    F = np.cumsum(mu, axis=1) * dy - 0.5 * dy * mu  # CDF at cell centers
    dFdt = np.gradient(F, path.times, axis=0, edge_order=2)
    dmu_dx = np.gradient(mu, dy, axis=1, edge_order=1)

    u = np.full(mu.shape, np.nan)
    alpha = params.alpha
    for k in range(K):
        m = mu[k]
        T = yc + alpha * np.minimum(F[k], 1.0)
        b = -np.asarray(params.v_prime(T), dtype=float)
        if params.W is not None:
            b = b - (np.asarray(params.w_prime(T[:, None] - T[None, :]), dtype=float) @ m) * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            vk = -dFdt[k] / m
            fisher = dmu_dx[k] / (2.0 * m)
        uk = vk + fisher - b
        u[k, common] = uk[common]

    u_sq = np.where(common[None, :], np.nan_to_num(u, nan=0.0) ** 2, 0.0)
    action_t = dy * np.sum(u_sq * mu, axis=1)
    action = 0.5 * float(np.trapezoid(action_t, path.times))
    return u, action


# ---------------------------------------------------------------------------
# Calibration of the additive constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    """Additive constants pinning the functional minima to zero, plus the
    minimizers they were computed from."""

    left: float
    right: float
    dy: float
    c_free_energy: float
    c_entropy: float
    c_gamma: float
    minimizer: GridDensity
    entropy_minimizer: GridDensity


@dataclass(frozen=True)
class TiltCalibration:
    c_tilt: float
    minimizer: GridDensity


def calibrate(params: ModelParams, left: float, right: float, dy: float) -> Calibration:
    """Compute the additive constants for a model on a truncated domain.

    The free-energy constant comes from the full minimizer; the entropy and
    gamma constants come from the interaction-free minimizer, the latter by
    matching the relative-entropy characterization at that minimizer.
    """
    from .pde import steady_state

    rho_star = steady_state(params, left, right, dy)
    c_F = -free_energy(rho_star, params).total_unnormalized

    params_w0 = replace(params, W=None)
    rho_e = steady_state(params_w0, left, right, dy)
    c_Ent = -free_energy(rho_e, params_w0).total_unnormalized

    count_c = int(round((right - params.alpha - left) / dy))
    mu_e = compress_grid_density(rho_e, params.alpha, left, dy, count_c)
    logZ, _ = gamma_z(mu_e, params)
    vals = mu_e.values
    pos = vals > 0
    plain_entropy = mu_e.dy * float(np.sum(vals[pos] * np.log(vals[pos])))
    Tc = _t_at_centers(mu_e, params.alpha)
    h_rel = plain_entropy + 2.0 * mu_e.dy * float(
        np.sum(vals * np.asarray(params.v_value(Tc), dtype=float))
    ) + logZ
    c_gamma = logZ - h_rel
    return Calibration(left, right, dy, c_F, c_Ent, c_gamma, rho_star, rho_e)


def calibrate_tilt(
    params: ModelParams, f: Optional[Callable], left: float, right: float, dy: float
) -> TiltCalibration:
    """Minimize the tilted functional (interaction-free, V replaced by
    V + f/2) and return the constant pinning its minimum to zero."""
    count = int(round((right - left) / dy))
    yc = left + (np.arange(count) + 0.5) * dy
    c = np.asarray(params.v_value(yc), dtype=float)
    if f is not None:
        c = c + 0.5 * np.asarray(f(yc), dtype=float)
    _, rho = solve_level_for_mass(c, params.alpha, dy)
    rho_f = GridDensity(left, dy, rho)
    c_tilt = -tilted_free_energy(rho_f, params, f).total_unnormalized
    return TiltCalibration(c_tilt, rho_f)
