"""Conformal welding of two independent GMC measures.

In log coordinates w = log z / (2 pi i) the unit disk is Im w > 0 and the
outside is Im w < 0.  Psi_1 (upper) and Psi_2 (lower) are the extensions of the
two circle homeomorphisms.  The welding map F solves the Beltrami equation
whose coefficient is that of Psi_1^{-1} above the real line and of
Psi_2^{-1} below; then f_j = F o Phi_j, i.e. L o Psi_j in log coordinates, and
on the circle f_1 o phi_1^{-1} = F = f_2 o phi_2^{-1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import shapely

from .beltrami_solver import StripGrid, StripOperator, StripSolution, solve_strip
from .event_stats import centre_event, match_event, shape_event, size_event
from .gmc_measures import build_measure
from .homeo_extension import HomeoExtension, strip_dilatation
from .whitenoise_fields import DomainError, sample_field_stack


class StageError(RuntimeError):
    def __init__(self, stage, err):
        super().__init__(f"[{stage}] {err}")
        self.stage = stage
        self.cause = err


@dataclass
class WeldingConfig:
    gamma: float = 0.2
    rho: float = 1 / 16
    M: int = 64
    depth: int = 3
    nx: int = 256
    n_list: tuple = (1, 2, 4, 8, 16)
    tol: float = 1e-10
    max_iter: int = 2000
    boundary_samples: int = 1024
    probes: int = 64
    gamma_max: float = 0.3
    stoilow: bool = True


@dataclass
class WeldingResult:
    curve: np.ndarray
    consistency_error: float
    cascade: list
    holder_fit: dict
    provenance: dict
    stoilow_median: float | None = None
    simple: bool = True
    solutions: dict = field(default_factory=dict, repr=False)
    flagged: int = 0
    homeos: tuple = field(default=(), repr=False)
    residuals: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)

    def report(self):
        return {
            "consistency_error": self.consistency_error,
            "cascade": self.cascade,
            "holder_fit": self.holder_fit,
            "stoilow_median": self.stoilow_median,
            "simple": self.simple,
            "flagged": self.flagged,
            "residuals": self.residuals,
            "iterations": self.iterations,
            "provenance": self.provenance,
        }


def _stage(name, fn, *a, **k):
    try:
        return fn(*a, **k)
    except Exception as err:  # noqa: BLE001 - tag and rethrow
        raise StageError(name, err) from err


def welding_measures(cfg: WeldingConfig, seed: int):
    """Two independent measures: replicas 0 and 1 of the seed's stream."""
    if cfg.gamma > cfg.gamma_max:
        raise DomainError(f"gamma={cfg.gamma} above gamma_max={cfg.gamma_max}")
    st = sample_field_stack(cfg.M, cfg.rho, cfg.depth, seed, replicas=2, with_v=False)
    tau = build_measure(st, cfg.gamma)
    return tau.masses[0], tau.masses[1]


def strip_coefficient(h1: HomeoExtension, h2: HomeoExtension, grid: StripGrid):
    X, Y = np.meshgrid(grid.x, grid.y)
    return strip_dilatation(h1, h2, X, Y)


def boundary_values(sol: StripSolution, x):
    return sol.F_at_w(np.asarray(x, dtype=float), np.zeros(np.shape(x)))


def _extrapolate(vals, k):
    # Lagrange weights at 0 for nodes k * delta, k = 1..len
    nodes = np.arange(1, k + 1, dtype=float)
    w = np.array([np.prod([nj / (nj - ni) for nj in nodes if nj != ni]) for ni in nodes])
    return vals @ w


def consistency_error(sol: StripSolution, h1: HomeoExtension, h2: HomeoExtension, theta, delta: float,
                      order: int = 4):
    """max |f_1(phi_1^{-1}(p)) - f_2(phi_2^{-1}(p))| over boundary probes p = e(theta).

    Each side is extrapolated to the circle from `order` interior (resp.
    exterior) points at heights delta, 2 delta, ... above u_j = psi_j^{-1}(theta).
    The extrapolation acts on L o Psi_j in log coordinates, which is the
    identity when the coefficient vanishes, and the result is mapped by F = e(L).
    """
    theta = np.asarray(theta, dtype=float)
    u1 = h1.psi_inv(theta)
    u2 = h2.psi_inv(theta)
    k = np.arange(1, order + 1) * delta
    U1, K = np.meshgrid(u1, k, indexing="ij")
    U2, _ = np.meshgrid(u2, k, indexing="ij")
    w1 = h1.ext(U1, K)
    w2 = h2.ext(U2, -K)
    l1 = _extrapolate(sol.L_at(w1.real, w1.imag), order)
    l2 = _extrapolate(sol.L_at(w2.real, w2.imag), order)
    shift = 2j * np.pi * sol.a_minus1
    e1 = np.exp(2j * np.pi * l1) - shift
    e2 = np.exp(2j * np.pi * l2) - shift
    return float(np.max(np.abs(e1 - e2))), e1, e2


def stoilow_residual(sol: StripSolution, h1: HomeoExtension, band=(0.0, 1.0)):
    """|mu| of L o Psi_1 at the preimages of lattice nodes in the averaging band.

    mu_L at a node is h / (1 + S h) from the solve; the composition rule
    mu_{L o Psi} = (mu_Psi + mu_L tau) / (1 + conj(mu_Psi) mu_L tau), with
    tau = conj(d Psi) / d Psi, gives the dilatation of f_1 there.
    """
    g = sol.grid
    X, Y = np.meshgrid(g.x, g.y)
    sel = (Y > band[0]) & (Y < band[1])
    zeta = X[sel] + 1j * Y[sel]
    w = h1.ext_inverse(zeta)
    dz, dzb = h1.wirtinger(w.real, w.imag)
    mu_psi = dzb / dz
    tau = np.conj(dz) / dz
    mu_l = sol.mu_on_grid()[sel]
    mu = (mu_psi + mu_l * tau) / (1 + np.conj(mu_psi) * mu_l * tau)
    return np.abs(mu)


def is_simple_curve(curve) -> bool:
    pts = np.asarray(curve)
    ring = shapely.LinearRing(np.column_stack([pts.real, pts.imag]))
    return bool(ring.is_simple)


def holder_estimate(samples, n_scales: int | None = None) -> dict:
    """Fit sup_{|p - q| = delta} |F(p) - F(q)| ~ C delta^alpha over dyadic index gaps.

    `samples` are F at e(j / K), j = 0..K-1; delta is the chord length of the gap.
    Returns C, alpha, R^2 and a 95% interval for alpha.
    """
    f = np.asarray(samples)
    K = f.size
    if K < 2**10:
        raise DomainError("need at least 1024 boundary samples")
    n_scales = n_scales or int(np.log2(K)) - 3
    gaps = 2 ** np.arange(n_scales)
    deltas = 2 * np.sin(np.pi * gaps / K)
    sups = np.array([np.max(np.abs(np.roll(f, -g) - f)) for g in gaps])
    x, y = np.log(deltas), np.log(sups)
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    alpha, logC = coef
    resid = y - A @ coef
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    dof = max(len(x) - 2, 1)
    se = np.sqrt(np.sum(resid**2) / dof / np.sum((x - x.mean()) ** 2))
    from scipy import stats
    tq = stats.t.ppf(0.975, dof)
    return {"C": float(np.exp(logC)), "alpha": float(alpha), "r2": float(r2),
            "alpha_ci": (float(alpha - tq * se), float(alpha + tq * se)),
            "deltas": deltas.tolist(), "sups": sups.tolist()}


def run_welding(cfg: WeldingConfig, seed: int, nx: int | None = None, masses=None) -> WeldingResult:
    """Measures, extensions, coefficient, truncated solves, curve and diagnostics."""
    nx = nx or cfg.nx
    if masses is None:
        m1, m2 = _stage("measures", welding_measures, cfg, seed)
    else:
        m1, m2 = masses
    h1 = _stage("homeo", HomeoExtension, m1, "upper")
    h2 = _stage("homeo", HomeoExtension, m2, "lower")
    grid = StripGrid(nx, 4 * nx)
    nu, flagged = _stage("dilatation", strip_coefficient, h1, h2, grid)
    op = StripOperator(grid)
    xb = np.arange(cfg.boundary_samples) / cfg.boundary_samples
    sols, residuals, iters = {}, {}, {}
    cascade = []
    prev = None
    for n in cfg.n_list:
        sol = _stage(f"beltrami n={n}", solve_strip, nu, grid, n, cfg.tol, cfg.max_iter, flagged, op)
        sols[n] = sol
        residuals[str(n)] = sol.residual_l2
        iters[str(n)] = sol.iterations
        fb = boundary_values(sol, xb)
        if prev is not None:
            cascade.append(float(np.max(np.abs(fb - prev))))
        prev = fb
    top = sols[max(cfg.n_list)]
    curve = boundary_values(top, xb)
    curve = np.append(curve, curve[0])
    theta = (np.arange(cfg.probes) + 0.5) / cfg.probes
    err, _, _ = _stage("consistency", consistency_error, top, h1, h2, theta, grid.dy)
    stoilow = None
    if cfg.stoilow:
        if np.abs(nu).max(initial=0) < 1:
            full = _stage("beltrami n=inf", solve_strip, nu, grid, None, cfg.tol, cfg.max_iter, flagged, op)
            stoilow = float(np.median(stoilow_residual(full, h1)))
            residuals["inf"] = full.residual_l2
            iters["inf"] = full.iterations
    prov = {"seed": int(seed), "gamma": cfg.gamma, "rho": cfg.rho, "M": cfg.M, "depth": cfg.depth,
            "nx": nx, "ny": grid.ny, "n_list": list(cfg.n_list), "tol": cfg.tol,
            "boundary_samples": cfg.boundary_samples}
    hold = holder_estimate(curve[:-1]) if cfg.boundary_samples >= 1024 else {}
    return WeldingResult(curve, err, cascade, hold, prov, stoilow, is_simple_curve(curve[:-1]),
                         sols, int(flagged.sum()), (h1, h2), residuals, iters)


def refinement_study(cfg: WeldingConfig, seed: int, nx_list=(128, 256)):
    """Consistency errors on successively halved lattice steps, same measures."""
    masses = welding_measures(cfg, seed)
    out = []
    for nx in nx_list:
        c = WeldingConfig(**{**cfg.__dict__, "n_list": (max(cfg.n_list),), "stoilow": False})
        out.append(run_welding(c, seed, nx=nx, masses=masses).consistency_error)
    return out


# ---------------------------------------------------------------------------
# composite annulus of two half-annuli

class _Identity:
    """Boundary map of Lebesgue measure, exact on Fractions."""

    def psi(self, x):
        return x


def _psi(h):
    return h.psi if hasattr(h, "psi") else h


@dataclass
class ChainReport:
    events: dict
    L: object
    upper: dict
    lower: dict
    containment: bool
    surrounds: bool
    c0: object
    probes_ok: bool | None
    failures: list

    def as_dict(self):
        def conv(v):
            if isinstance(v, Fraction):
                return str(v)
            if isinstance(v, dict):
                return {k: conv(u) for k, u in v.items()}
            if isinstance(v, (np.floating, np.bool_)):
                return v.item()
            return v
        return {k: conv(v) for k, v in self.__dict__.items()}


def _rpow(rho, t):
    """rho**t, exact when rho is a Fraction power of two and the exponent comes out integral."""
    if isinstance(rho, Fraction):
        n, d = rho.numerator, rho.denominator
        if n == 1 and d & (d - 1) == 0:
            e = Fraction(d.bit_length() - 1) * Fraction(t)
            if e.denominator == 1:
                return Fraction(1, 2 ** int(e))
        raise DomainError("exact powers need rho = 2**-e with integral exponent")
    return rho**t


def _thickness_boxes(g, x, r, R):
    steps = [g(x - R + k * R / 4) - g(x - R + (k - 1) * R / 4) for k in range(1, 9)]
    Rp = min(steps) / 2
    rp = g(x + 2 * r) - g(x - 2 * r)
    return Rp, rp


def chain_constant(T1, T2):
    """c0 = 2^-44 / (2^43 (T1^2 + T2^2)), exact on rationals."""
    two = Fraction(2) if isinstance(T1, Fraction) else 2.0
    return two**-44 / (two**43 * (T1**2 + T2**2))


def annulus_chain_report(homeo1, homeo2, x, y, t, s, N: int, rho, eps=1, totals=(1, 1),
                         masses=None, n_probe: int = 1000) -> ChainReport:
    """Composite annulus around psi_1(x) built from the images of A_t(x) and of the reflected A_s(y).

    homeo_j is a HomeoExtension or a monotone callable; with exact Fractions
    (Lebesgue measure, rho a power of two) every check is exact.  Event flags
    are evaluated when grid masses are supplied; otherwise Size, Shape,
    Centre and Match are read off the boundary maps directly.
    """
    g1, g2 = _psi(homeo1), _psi(homeo2)
    failures = []
    q = Fraction(1, 4) if isinstance(rho, Fraction) else 0.25
    R1, r1 = _rpow(rho, t), _rpow(rho, t + q)
    R2, r2 = _rpow(rho, s), _rpow(rho, s + q)
    L = (g2(y + R2) - g2(y - R2)) / 2**22
    R1p, r1p = _thickness_boxes(g1, x, r1, R1)
    R2p, r2p = _thickness_boxes(g2, y, r2, R2)
    shift = g1(x) - g2(y)
    upper = {"R_prime": R1p, "r_prime": r1p, "outer_ok": 2 * L <= R1p, "inner_ok": r1p <= L}
    lower = {"R_prime": R2p, "r_prime": r2p, "shift": shift,
             "outer_ok": abs(shift) + 2 * L <= R2p, "inner_ok": abs(shift) + r2p <= L}
    for name, d in (("upper", upper), ("lower", lower)):
        for k in ("outer_ok", "inner_ok"):
            if not d[k]:
                failures.append(f"{name}.{k}")
    containment = not failures
    width = _rpow(rho, (1 + eps) * 5 * N)
    seg = (g2(y), g2(y + width))
    surrounds = all(abs(p - g1(x)) < L for p in seg)
    if not surrounds:
        failures.append("surrounds")

    events = {}
    if masses is not None:
        m1, m2 = masses
        i, j = int(x), int(y)
        events = {"Size": size_event(m1, m2, i, j, t, s, rho), "Shape1": bool(shape_event(m1, i, t, rho)),
                  "Shape2": bool(shape_event(m2, j, s, rho)), "Centre": centre_event(m2, j, N, rho, eps),
                  "Match": match_event(m1, m2, i, j, N, rho, eps)}

    probes_ok = None
    if isinstance(homeo1, HomeoExtension) and isinstance(homeo2, HomeoExtension) and containment:
        probes_ok = _probe_containment(homeo1, homeo2, x, y, t, s, rho, float(L), n_probe)
        if not probes_ok:
            failures.append("probes")
    T1, T2 = totals
    return ChainReport(events, L, upper, lower, containment, surrounds, chain_constant(T1, T2), probes_ok, failures)


def _square_boundary(c, a, n):
    # n points on the boundary of c + a [-1, 1]^2
    s = np.linspace(-1, 1, n // 4, endpoint=False)
    edges = np.concatenate([s + -1j, 1 + 1j * s, -s + 1j, -1 - 1j * s])
    return c + a * edges


def _probe_containment(h1, h2, x, y, t, s, rho, L, n):
    """Preimages of points on the boundary of the composite annulus land in the half-annuli."""
    c = float(h1.psi(x))
    pts = np.concatenate([_square_boundary(c, 2 * L, n), _square_boundary(c, L, n)])
    pts = pts[np.abs(pts.imag) > 1e-15]
    up = pts[pts.imag > 0]
    lo = pts[pts.imag < 0]
    ok = True
    for h, p, ctr, sc, sign in ((h1, up, x, t, 1), (h2, lo, y, s, -1)):
        w = h.ext_inverse(p)
        R, r = rho**sc, rho ** (sc + 0.25)
        u = w.real - ctr
        v = sign * w.imag
        inside_outer = (np.abs(u) <= R) & (v <= R) & (v >= 0)
        outside_inner = ~((np.abs(u) < r) & (v < r))
        ok &= bool(np.all(inside_outer & outside_inner))
    return ok


def lebesgue_chain_report(e: int, x=Fraction(1, 2), y=Fraction(1, 2), t=1, s=1, N=1, eps=1):
    """Exact chain report for Lebesgue measure and rho = 2**-e."""
    rho = Fraction(1, 2**e)
    ident = _Identity()
    return annulus_chain_report(ident, ident, Fraction(x), Fraction(y), Fraction(t), Fraction(s), N, rho,
                                Fraction(eps), totals=(Fraction(1), Fraction(1)))
