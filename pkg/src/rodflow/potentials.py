"""Potential pairs (V, W) and the mean-field drift of the compressed system.

On-site potentials must be globally Lipschitz with a linear coercivity
floor V(y) >= c1*|y| - c2; interaction potentials must be even and bounded
with bounded derivative.  Constructors audit these properties on a sample
grid so that invalid potentials fail fast rather than corrupting a long
simulation.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "Potential",
    "ModelParams",
    "PotentialAuditError",
    "builtin_huber_v",
    "builtin_gaussian_w",
    "table_potential",
    "coercive_truncation",
    "drift_b",
    "drift_b_all",
    "drift_batch_sorted",
]

_AUDIT_GRID = np.concatenate(
    [np.linspace(-50.0, 50.0, 2001), np.array([-1e3, -1e2, 1e2, 1e3])]
)


class PotentialAuditError(ValueError):
    """A potential fails its structural audit (coercivity, evenness, bounds)."""


@dataclass(frozen=True)
class Potential:
    """Scalar potential with derivative and audited structural bounds.

    ``kind`` is "onsite" (coercive, Lipschitz) or "interaction" (even,
    bounded).  ``value`` and ``derivative`` must accept numpy arrays.
    """

    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    lipschitz_bound: float
    kind: str
    coercivity: tuple[float, float] | None = None  # (c1, c2) for onsite
    bound: float | None = None  # sup |W| for interaction
    name: str = "custom"

    def __post_init__(self):
        if self.kind not in ("onsite", "interaction"):
            raise ValueError("kind must be 'onsite' or 'interaction'")
        self._audit()

    def _audit(self):
        g = _AUDIT_GRID
        v = np.asarray(self.value(g), dtype=float)
        dv = np.asarray(self.derivative(g), dtype=float)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(dv))):
            raise PotentialAuditError(f"{self.name}: non-finite values on audit grid")
        if np.max(np.abs(dv)) > self.lipschitz_bound * (1 + 1e-9) + 1e-12:
            raise PotentialAuditError(
                f"{self.name}: |derivative| exceeds declared Lipschitz bound "
                f"({np.max(np.abs(dv)):.6g} > {self.lipschitz_bound:.6g})"
            )
        if self.kind == "onsite":
            if self.coercivity is None:
                raise PotentialAuditError(f"{self.name}: onsite potential needs (c1, c2)")
            c1, c2 = self.coercivity
            if c1 <= 0:
                raise PotentialAuditError(f"{self.name}: coercivity slope c1 must be > 0")
            if np.any(v < c1 * np.abs(g) - c2 - 1e-9):
                raise PotentialAuditError(f"{self.name}: coercivity floor violated")
        else:
            if np.max(np.abs(v - self.value(-g))) > 1e-12 * max(1.0, np.max(np.abs(v))):
                raise PotentialAuditError(f"{self.name}: interaction potential not even")
            if self.bound is None:
                raise PotentialAuditError(f"{self.name}: interaction potential needs a bound")
            if np.max(np.abs(v)) > self.bound * (1 + 1e-9) + 1e-12:
                raise PotentialAuditError(f"{self.name}: |value| exceeds declared bound")


def builtin_huber_v(c: float, s: float) -> Potential:
    """Smoothed absolute value V(y) = c*(sqrt(s^2 + y^2) - s).

    Quadratic well of curvature c/s near the origin, slope +-c at infinity;
    satisfies the coercivity floor with (c1, c2) = (c, c*s).
    """
    if c <= 0 or s <= 0:
        raise ValueError("need c > 0 and s > 0")
    return Potential(
        value=lambda y, c=c, s=s: c * (np.sqrt(s * s + np.asarray(y, float) ** 2) - s),
        derivative=lambda y, c=c, s=s: c * np.asarray(y, float) / np.sqrt(s * s + np.asarray(y, float) ** 2),
        lipschitz_bound=c,
        kind="onsite",
        coercivity=(c, c * s),
        name=f"huber(c={c:g},s={s:g})",
    )


def builtin_gaussian_w(w0: float, sigma: float) -> Potential:
    """Gaussian bump W(y) = w0 * exp(-y^2 / (2 sigma^2)); even and bounded."""
    if sigma <= 0:
        raise ValueError("need sigma > 0")
    inv2s2 = 1.0 / (2.0 * sigma * sigma)

    # In-place pipelines: these run on O(n^2) pair arrays inside the
    # simulation hot loop, where temporaries dominate the cost.
    def value(y):
        y = np.asarray(y, dtype=float)
        out = y * y
        out *= -inv2s2
        np.exp(out, out=out)
        out *= w0
        return out

    def derivative(y):
        y = np.asarray(y, dtype=float)
        out = y * y
        out *= -inv2s2
        np.exp(out, out=out)
        out *= y
        out *= -w0 / (sigma * sigma)
        return out

    return Potential(
        value=value,
        derivative=derivative,
        lipschitz_bound=abs(w0) / (sigma * np.sqrt(np.e)) * (1 + 1e-9),
        kind="interaction",
        bound=abs(w0),
        name=f"gaussian(w0={w0:g},sigma={sigma:g})",
    )


def table_potential(
    csv_text: str,
    kind: str,
    lipschitz_bound: float,
    coercivity: tuple[float, float] | None = None,
    bound: float | None = None,
    name: str = "table",
) -> Potential:
    """Potential from CSV columns y, V, V' with cubic interpolation.

    Outside the tabulated range the potential continues linearly with the
    edge slope.  The declared ``lipschitz_bound`` must leave headroom for
    spline overshoot between samples (a fraction of a percent for smooth
    tables, more near kinks).
    """
    rows = [r for r in csv_text.strip().splitlines() if r and not r.startswith("#")]
    if rows and rows[0].lower().replace(" ", "").startswith("y,"):
        rows = rows[1:]
    data = np.array([[float(c) for c in r.split(",")] for r in rows], dtype=float)
    if data.shape[1] != 3:
        raise ValueError("table potential needs exactly columns y, V, V'")
    y, v, dv = data[:, 0], data[:, 1], data[:, 2]
    order = np.argsort(y)
    y, v, dv = y[order], v[order], dv[order]
    sp_v = CubicSpline(y, v, extrapolate=False)
    sp_dv = CubicSpline(y, dv, extrapolate=False)
    ylo, yhi = y[0], y[-1]
    vlo, vhi, slo, shi = v[0], v[-1], dv[0], dv[-1]

    def value(q):
        q = np.asarray(q, float)
        out = sp_v(q)
        out = np.where(q < ylo, vlo + slo * (q - ylo), out)
        out = np.where(q > yhi, vhi + shi * (q - yhi), out)
        return out

    def derivative(q):
        q = np.asarray(q, float)
        out = sp_dv(q)
        out = np.where(q < ylo, slo, out)
        out = np.where(q > yhi, shi, out)
        return out

    return Potential(
        value=value,
        derivative=derivative,
        lipschitz_bound=lipschitz_bound,
        kind=kind,
        coercivity=coercivity,
        bound=bound,
        name=name,
    )


@dataclass(frozen=True)
class ModelParams:
    """Rod volume fraction plus the potential pair and optional tilt.

    ``alpha`` may be 0 (zero-size particles); several reductions in the test
    suite rely on that degenerate case.
    """

    alpha: float
    V: Potential | None = None
    W: Potential | None = None
    tilt: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not (0.0 <= self.alpha < 1.0):
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.V is not None and self.V.kind != "onsite":
            raise ValueError("V must be an onsite potential")
        if self.W is not None and self.W.kind != "interaction":
            raise ValueError("W must be an interaction potential")

    def v_value(self, y):
        return self.V.value(y) if self.V is not None else np.zeros_like(np.asarray(y, float))

    def v_prime(self, y):
        return self.V.derivative(y) if self.V is not None else np.zeros_like(np.asarray(y, float))

    def w_value(self, y):
        return self.W.value(y) if self.W is not None else np.zeros_like(np.asarray(y, float))

    def w_prime(self, y):
        return self.W.derivative(y) if self.W is not None else np.zeros_like(np.asarray(y, float))

    def drift_bound(self) -> float:
        """Uniform bound Lip(V) + sup|W'| on the mean-field drift."""
        b = 0.0
        if self.V is not None:
            b += self.V.lipschitz_bound
        if self.W is not None:
            b += self.W.lipschitz_bound
        return b


def coercive_truncation(params: ModelParams, tail_tol: float = 1e-14) -> float | None:
    """Half-width L such that exp(-2 V(T x)) has tail mass below tail_tol
    outside [-L, L], from the coercivity floor V(T x) >= c1(|x| - alpha) - c2.

    Returns None when no on-site potential is present (no confinement).
    """
    if params.V is None or params.V.coercivity is None:
        return None
    c1, c2 = params.V.coercivity
    L = params.alpha + (c2 - 0.5 * np.log(2.0 * c1 * tail_tol)) / c1
    return float(max(L, 1.0))


def _expanded_positions(points: np.ndarray, alpha: float) -> np.ndarray:
    """T-image of sorted points: strict-left rank shifts, ties share a shift."""
    n = points.size
    ranks = np.searchsorted(points, points, side="left")
    return points + alpha * ranks / n


def drift_b(x_i: float, mu, params: ModelParams) -> float:
    """Mean-field drift felt by the particle at x_i within configuration mu.

    Evaluates -V'(T x_i) - (1/n) sum_j W'(T x_i - T x_j) where T shifts each
    particle by alpha times its strict-left rank fraction.
    """
    pts = mu.points
    T = _expanded_positions(pts, params.alpha)
    ti = x_i + params.alpha * np.searchsorted(pts, x_i, side="left") / pts.size
    b = -float(params.v_prime(ti))
    if params.W is not None:
        b -= float(np.mean(params.w_prime(ti - T)))
    return b


def drift_b_all(mu, params: ModelParams) -> np.ndarray:
    """Drift for every particle of mu; matches per-particle drift_b calls.

    Only ranks matter, so the result is invariant under relabelling; the
    pair sum is exact O(n^2).
    """
    pts = mu.points
    T = _expanded_positions(pts, params.alpha)
    b = -np.asarray(params.v_prime(T), dtype=float)
    if params.W is not None:
        b = b - np.mean(params.w_prime(T[:, None] - T[None, :]), axis=1)
    return b


def drift_batch_sorted(points: np.ndarray, params: ModelParams) -> np.ndarray:
    """Drift for a batch (R, n) of row-sorted configurations.

    Uses positional ranks (row index), which coincide with strict-left
    ranks whenever the row has no exact ties; ties occur with probability
    zero along diffusion paths.
    """
    R, n = points.shape
    T = points + (params.alpha / n) * np.arange(n)
    b = -np.asarray(params.v_prime(T), dtype=float)
    if params.W is not None:
        b = b - np.mean(params.w_prime(T[:, :, None] - T[:, None, :]), axis=2)
    return b
