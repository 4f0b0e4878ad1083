"""Compression / expansion maps between rod and zero-length descriptions.

A configuration of n rods of length alpha/n maps one-to-one onto a
configuration of zero-length particles by shifting the particle of rank r
left by r*alpha/n (compression) or right (expansion).  In mass coordinates
the continuous analogue is the shear Y(m) = X(m) + alpha*m on quantile
functions.  Both maps are isometries of the quadratic transport distance.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .measures import EmpiricalMeasure, GridDensity, Icdf, icdf_of, DEFAULT_MASS_GRID

__all__ = [
    "Side",
    "AdmissibilityError",
    "DensityCeilingError",
    "GAP_TOL",
    "expand_particles",
    "compress_particles",
    "expand_density",
    "compress_density",
    "t_mu",
    "expand_grid_density",
    "compress_grid_density",
]

# Absolute tolerance on rod gaps; the simulators enforce the constraint
# exactly, this only absorbs float rounding.
GAP_TOL = 1e-12


class Side(Enum):
    """Which coordinate system a measure or path lives in."""

    COMPRESSED = "compressed"
    EXPANDED = "expanded"


class AdmissibilityError(ValueError):
    """A rod configuration violates the minimum-gap constraint."""


class DensityCeilingError(ValueError):
    """An expanded-side density reaches the packing ceiling 1/alpha."""


def _check_alpha(alpha: float) -> float:
    # Maps are algebraically valid for any nonnegative total rod length;
    # the model itself restricts the volume fraction to [0, 1).
    if not (alpha >= 0 and np.isfinite(alpha)):
        raise ValueError(f"alpha must be a finite nonnegative real, got {alpha}")
    return float(alpha)


def expand_particles(x: EmpiricalMeasure, alpha: float) -> EmpiricalMeasure:
    """Shift the sorted particle of rank i right by i*alpha/n.

    Output gaps are the input gaps plus alpha/n, so the result is always an
    admissible rod configuration.
    """
    _check_alpha(alpha)
    n = x.n
    y = x.points + alpha * np.arange(n) / n
    return EmpiricalMeasure(y)


def compress_particles(y: EmpiricalMeasure, alpha: float) -> EmpiricalMeasure:
    """Exact left inverse of :func:`expand_particles`.

    Requires sorted gaps >= alpha/n (up to ``GAP_TOL``); otherwise the input
    is not a rod configuration and :class:`AdmissibilityError` is raised.
    """
    _check_alpha(alpha)
    n = y.n
    if n > 1:
        gaps = np.diff(y.points)
        bad = gaps < alpha / n - GAP_TOL
        if np.any(bad):
            j = int(np.argmax(bad))
            raise AdmissibilityError(
                f"gap {gaps[j]:.3e} between particles {j} and {j + 1} is below alpha/n = {alpha / n:.3e}"
            )
    x = y.points - alpha * np.arange(n) / n
    # Rounding can leave micro-inversions of order GAP_TOL; ordering is
    # restored by the EmpiricalMeasure constructor.
    return EmpiricalMeasure(x)


def expand_density(mu: GridDensity | Icdf, alpha: float, M: int = DEFAULT_MASS_GRID) -> Icdf:
    """Apply the mass-coordinate shear Y(m) = X(m) + alpha*m.

    Exact in mass coordinates; the resulting density automatically satisfies
    rho < 1/alpha wherever the input has a density.
    """
    _check_alpha(alpha)
    X = mu if isinstance(mu, Icdf) else icdf_of(mu, M)
    return Icdf(X.m_grid, X.x_values + alpha * X.m_grid)


def compress_density(rho: GridDensity | Icdf, alpha: float, M: int = DEFAULT_MASS_GRID) -> Icdf:
    """Invert the shear: X(m) = Y(m) - alpha*m.

    The input quantile function must rise strictly faster than alpha per
    unit mass (discrete slope > alpha), i.e. the density must stay strictly
    below 1/alpha; otherwise :class:`DensityCeilingError` is raised.
    """
    _check_alpha(alpha)
    Y = rho if isinstance(rho, Icdf) else icdf_of(rho, M)
    dm = np.diff(Y.m_grid)
    slopes = np.diff(Y.x_values) / dm
    if np.any(slopes - alpha <= 1e-12):
        j = int(np.argmax(slopes - alpha <= 1e-12))
        raise DensityCeilingError(
            f"quantile slope {slopes[j]:.6g} <= alpha at m = {Y.m_grid[j]:.4f} "
            f"(density >= 1/alpha)"
        )
    return Icdf(Y.m_grid, Y.x_values - alpha * Y.m_grid)


def t_mu(mu, x, alpha: float):
    """Pointwise expansion map x + alpha * mu((-inf, x)); atoms at x excluded.

    Accepts scalars or arrays for x.
    """
    _check_alpha(alpha)
    xarr = np.asarray(x, dtype=float)
    if isinstance(mu, EmpiricalMeasure):
        left_mass = mu.cdf_left(xarr)
    elif isinstance(mu, GridDensity):
        left_mass = mu.cdf(xarr)
    elif isinstance(mu, Icdf):
        left_mass = np.searchsorted(mu.x_values, xarr, side="left") / mu.size
    else:
        raise TypeError(f"not a Measure1D: {type(mu)!r}")
    out = xarr + alpha * left_mass
    return float(out) if np.isscalar(x) else out


def expand_grid_density(
    mu: GridDensity, alpha: float, left: float, dy: float, count: int
) -> GridDensity:
    """Expanded grid density via the pointwise relation rho(T x) = mu/(1 + alpha*mu).

    The image points T(x_j) are strictly increasing (T' = 1 + alpha*mu >= 1),
    so the expanded density resamples smoothly onto the target grid.
    """
    _check_alpha(alpha)
    xc = mu.centers()
    y_img = t_mu(mu, xc, alpha)
    rho_img = mu.values / (1.0 + alpha * mu.values)
    yc = left + (np.arange(count) + 0.5) * dy
    vals = np.interp(yc, y_img, rho_img, left=0.0, right=0.0)
    return GridDensity(left, dy, vals)


def compress_grid_density(
    rho: GridDensity, alpha: float, left: float, dy: float, count: int
) -> GridDensity:
    """Compressed grid density via mu(y - alpha*F(y)) = rho/(1 - alpha*rho)."""
    _check_alpha(alpha)
    if np.any(rho.values >= 1.0 / alpha - 1e-12) and alpha > 0:
        raise DensityCeilingError("density reaches 1/alpha; compression undefined")
    yc = rho.centers()
    x_img = yc - alpha * rho.cdf(yc)
    mu_img = rho.values / (1.0 - alpha * rho.values) if alpha > 0 else rho.values
    xc = left + (np.arange(count) + 0.5) * dy
    vals = np.interp(xc, x_img, mu_img, left=0.0, right=0.0)
    return GridDensity(left, dy, vals)
