"""Discretized Gaussian multiplicative chaos measures on the circle.

A measure is a vector of cell masses on the cells [i/M, (i+1)/M).  The field
sample with index i is read as the value at the cell midpoint; by
stationarity this only relabels the grid.  Masses may carry leading replica
axes, every query broadcasts over them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .whitenoise_fields import DomainError, FieldStack, field, slab_overlap_area

GAMMA_MAX = np.sqrt(2.0)


@dataclass
class MeasureSample:
    masses: np.ndarray
    gamma: float
    kind: str = "tau"
    cutoff_scale: float | None = None
    normalization: dict | None = None

    @property
    def M(self) -> int:
        return self.masses.shape[-1]

    @property
    def total(self):
        return self.masses.sum(axis=-1)


def check_gamma(gamma: float):
    if gamma < 0 or gamma**2 >= 2:
        raise DomainError(f"gamma={gamma} outside [0, sqrt 2)")


def _lognormal(values, gamma, var):
    return np.exp(gamma * values - 0.5 * gamma**2 * var)


def build_measure(stack: FieldStack, gamma: float, depth_cutoff: float | None = None) -> MeasureSample:
    """Measure with density exp(gamma H - gamma^2/2 Var) e^{-gamma G} 2^{-gamma^2}."""
    check_gamma(gamma)
    t = stack.depth if depth_cutoff is None else depth_cutoff
    h = field(stack, t, "H")
    var = slab_overlap_area("H", stack.rho**t, np.inf, 0.0)
    g_factor = np.exp(-gamma * np.asarray(stack.G)) * 2.0 ** (-gamma**2)
    masses = _lognormal(h, gamma, var) / stack.M * np.asarray(g_factor)[..., None]
    return MeasureSample(masses, gamma, "tau", t,
                         {"var": var, "G": np.asarray(stack.G).tolist(), "const": 2.0 ** (-gamma**2)})


def build_restricted_measure(stack: FieldStack, gamma: float, t: float, kind: str = "tau_t") -> MeasureSample:
    """Measure driven only by the field below height rho**t.

    The finest available height rho**depth plays the role of the vanishing cutoff.
    """
    check_gamma(gamma)
    region = {"tau_t": "H", "nu_t": "V"}.get(kind)
    if region is None:
        raise DomainError(f"unknown restricted kind {kind!r}")
    stack.step_of(t)
    fine = stack.depth
    if t > fine:
        raise DomainError(f"scale {t} below the finest layer {fine}")
    if t == fine:
        masses = np.broadcast_to(np.full(stack.M, 1.0 / stack.M), stack.H.shape[:-2] + (stack.M,)).copy()
        return MeasureSample(masses, gamma, kind, t, {"var": 0.0})
    inc = field(stack, fine, region) - field(stack, t, region)
    var = slab_overlap_area(region, stack.rho**fine, stack.rho**t, 0.0)
    masses = _lognormal(inc, gamma, var) / stack.M
    return MeasureSample(masses, gamma, kind, t, {"var": var})


def uniform_measure(M: int) -> MeasureSample:
    return MeasureSample(np.full(M, 1.0 / M), 0.0, "tau", None, {"var": 0.0})


def _prefix(masses):
    z = np.zeros(masses.shape[:-1] + (1,))
    return np.concatenate([z, np.cumsum(masses, axis=-1)], axis=-1)


def cumulative(masses: np.ndarray, x) -> np.ndarray:
    """tau([0, x]) continued periodically: tau([0, x + n]) = tau([0, x]) + n tau([0, 1]).

    Shapes: masses (..., M), x (K,) or scalar -> (..., K).
    """
    masses = np.asarray(masses)
    M = masses.shape[-1]
    x = np.asarray(x, dtype=float)
    flat = np.atleast_1d(x)
    pre = _prefix(masses)
    total = pre[..., -1:]
    n = np.floor(flat)
    r = (flat - n) * M
    i = np.minimum(r.astype(np.int64), M - 1)
    frac = r - i
    val = pre[..., i] + frac * masses[..., i] + n * total
    return val if x.ndim else val[..., 0]


def interval_mass(measure, a, b):
    """Mass of [a, b] on the circle; b - a may not exceed one turn."""
    masses = measure.masses if isinstance(measure, MeasureSample) else np.asarray(measure)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b < a) or np.any(b - a > 1 + 1e-12):
        raise DomainError("need a <= b <= a + 1")
    return cumulative(masses, b) - cumulative(masses, a)


def cdf(measure, x):
    """Normalized distribution function, psi(x) = tau([0, x]) / tau([0, 1])."""
    masses = measure.masses if isinstance(measure, MeasureSample) else np.asarray(measure)
    return cumulative(masses, x) / masses.sum(axis=-1, keepdims=np.ndim(x) > 0)


def inverse_cdf(measure, q):
    """Exact inverse of the piecewise-linear cdf, continued periodically."""
    masses = measure.masses if isinstance(measure, MeasureSample) else np.asarray(measure)
    if masses.ndim != 1:
        raise DomainError("inverse_cdf works on a single measure")
    M = masses.size
    pre = _prefix(masses)
    knots = pre / pre[-1]
    q = np.asarray(q, dtype=float)
    flat = np.atleast_1d(q)
    n = np.floor(flat)
    r = flat - n
    i = np.clip(np.searchsorted(knots, r, side="right") - 1, 0, M - 1)
    dens = masses[i] / pre[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(dens > 0, (r - knots[i]) / dens, 0.0)
    out = (i + np.clip(frac, 0.0, 1.0)) / M + n
    return out if q.ndim else float(out[0])


def zeta_p(p: float, gamma: float) -> float:
    """Multifractal exponent p - (p^2 - p) gamma^2 / 2."""
    return p - (p * p - p) * gamma**2 / 2


def dyadic_moments(masses: np.ndarray, p: float, deltas) -> np.ndarray:
    """Per replica average of tau(I)^p over the disjoint translates I of [0, delta].

    By stationarity each entry is an unbiased estimate of E[tau([0, delta])^p].
    Returns an array (replicas, len(deltas)).
    """
    masses = np.atleast_2d(masses)
    R, M = masses.shape
    out = np.empty((R, len(deltas)))
    for j, d in enumerate(deltas):
        k = int(round(d * M))
        if k < 1 or M % k:
            raise DomainError(f"delta={d} is not a whole number of cells dividing the circle")
        blocks = masses.reshape(R, M // k, k).sum(axis=-1)
        out[:, j] = np.mean(blocks**p, axis=-1)
    return out


@dataclass
class SlopeEstimate:
    slope: float
    ci: tuple
    p: float
    deltas: list
    log_moments: list
    heavy_tail: bool


def moment_slope(masses: np.ndarray, p: float, deltas, gamma: float | None = None,
                 n_boot: int = 1000, seed: int = 0) -> SlopeEstimate:
    """Least-squares slope of log E[tau([0, delta])^p] against log delta.

    The confidence interval is a percentile bootstrap over replicas.
    """
    heavy = gamma is not None and gamma > 0 and p >= 2 / gamma**2
    if heavy:
        warnings.warn(f"p={p} is beyond the moment threshold 2/gamma^2; estimate is unreliable")
    per_rep = dyadic_moments(masses, p, deltas)
    x = np.log(np.asarray(deltas, dtype=float))

    def fit(mean_moments):
        return np.polyfit(x, np.log(mean_moments), 1)[0]

    est = fit(per_rep.mean(axis=0))
    rng = np.random.default_rng(seed)
    R = per_rep.shape[0]
    boots = np.array([fit(per_rep[rng.integers(0, R, R)].mean(axis=0)) for _ in range(n_boot)])
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return SlopeEstimate(float(est), (float(lo), float(hi)), p, list(map(float, deltas)),
                         np.log(per_rep.mean(axis=0)).tolist(), heavy)


def ensemble_rows(masses: np.ndarray, deltas):
    """Rows (replica, scale, interval, mass) for the dyadic intervals of each replica."""
    masses = np.atleast_2d(masses)
    R, M = masses.shape
    rows = []
    for d in deltas:
        k = int(round(d * M))
        blocks = masses.reshape(R, M // k, k).sum(axis=-1)
        for r in range(R):
            for i, m in enumerate(blocks[r]):
                rows.append((r, float(d), i, float(m)))
    return rows
