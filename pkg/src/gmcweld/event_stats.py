"""Scale events on pairs of GMC measures and their Monte Carlo frequencies.

Intervals are given by offsets from a centre point (x or y), so masses of
intervals far below the grid spacing keep full relative precision.  Grid
measures have constant density on each cell; continuum suprema of fields are
replaced by maxima over grid points.

Lebesgue measure with rho = 2**-e has its own exact predicate where every
quantity is a power of two.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from fractions import Fraction
from math import log

import numpy as np
from scipy import stats

from .gmc_measures import MeasureSample, build_restricted_measure
from .whitenoise_fields import DomainError, FieldStack, field as field_at_scale, point_variance

LOG2 = log(2.0)

EVENT_NAMES = ("Shape1", "Shape2", "Size", "Centre", "Match", "AnnPrime", "ShapeRed1", "ShapeRed2",
               "SizeRed", "Upp", "Low", "Frac", "Scal")

DEFAULT_CONSTANTS = {
    "Shape": {"J": 2.0**-9, "inner": 2.0**-33, "double": 2.0**7, "dyadic": 2.0**13},
    "Size": {"lo": 2.0**-11, "hi": 2.0**11},
    "Centre": {"ratio": 2.0**-23},
    "ShapeRed": {"mass_lo": 1.0, "mass_hi": 2.0**2, "J": 2.0**-4, "inner": 2.0**-38,
                 "double": 2.0**2, "dyadic": 2.0**5},
    "SizeRed": {"bound": LOG2},
    "Upp": {"bound": LOG2},
    "Low": {"exponent": -41},
    "Frac": {"bound": LOG2},
    "Scal": {"ratio": 2.0**-1, "bound": LOG2},
}


def constants_table(overrides: dict | None = None) -> dict:
    """Default thresholds with overrides {'Shape': {'J': ...}, ...} merged in."""
    table = copy.deepcopy(DEFAULT_CONSTANTS)
    for group, vals in (overrides or {}).items():
        if group not in table:
            raise DomainError(f"unknown constant group {group!r}")
        for k, v in vals.items():
            if k not in table[group]:
                raise DomainError(f"unknown constant {group}.{k}")
            table[group][k] = v
    return table


# ---------------------------------------------------------------------------
# interval families

def check_quarter(t) -> Fraction:
    """Scales live on the quarter-integer lattice."""
    q = Fraction(t).limit_denominator(1 << 20)
    if abs(float(q) - float(t)) > 1e-12 or (q * 4).denominator != 1:
        raise DomainError(f"scale {t} is not a multiple of 1/4")
    return q


@dataclass(frozen=True)
class IntervalFamily:
    """Offsets of B_t, J_{t,l}, I_{m,l,t} for scale base rho (float or Fraction)."""

    rho: object

    def r(self, t):
        return self.rho ** t

    def B(self, t, factor=1):
        r = self.r(t)
        return (-factor * r, factor * r)

    def J(self, t, ell):
        r = self.r(t)
        return (r * (ell - 5) / 4, r * (ell - 4) / 4)

    def I(self, m, ell, t):
        r = self.r(t)
        return ((ell - 2) * r / 2**m, (ell + 2) * r / 2**m)


def dyadic_index_set(m: int, r, R) -> np.ndarray:
    """S(m, r, R) = {l : r <= R 2^-m |l| <= R}, r > 0."""
    lo = int(np.ceil(float(r) * 2.0**m / float(R) * (1 - 1e-15)))
    lo = max(lo, 1)
    pos = np.arange(lo, 2**m + 1)
    return np.concatenate([-pos[::-1], pos])


def dyadic_count(m: int, q: Fraction) -> int:
    """|S(m, r, R)| exactly when r / R = 2**-q, q >= 0 rational."""
    k = ceil_pow2(Fraction(m) - q)
    n = 2**m - k + 1
    return 2 * max(n, 0)


def _iroot_ceil(n: int, b: int) -> int:
    """Smallest integer k with k**b >= n."""
    if b == 1:
        return n
    k = 1 << -(-n.bit_length() // b)  # k**b >= n
    while True:
        # Newton step from above for the floor root
        k2 = ((b - 1) * k + n // k ** (b - 1)) // b
        if k2 >= k:
            break
        k = k2
    while k**b < n:
        k += 1
    while k > 1 and (k - 1) ** b >= n:
        k -= 1
    return k


def ceil_pow2(q: Fraction) -> int:
    """Exact ceiling of 2**q for rational q."""
    q = Fraction(q)
    if q <= 0:
        return 1
    return _iroot_ceil(1 << q.numerator, q.denominator)


# ---------------------------------------------------------------------------
# masses around a point

class OffsetMass:
    """Masses of x + [a, b] for a grid measure and x = i / M."""

    def __init__(self, masses, i: int):
        m = np.asarray(masses, dtype=float)
        if m.ndim != 1:
            raise DomainError("one measure at a time")
        self.m = m
        self.M = m.size
        self.i = int(i) % self.M
        # prefix over cells i, i+1, ... and i-1, i-2, ...
        fwd = np.roll(m, -self.i)
        self.fwd = np.concatenate([[0.0], np.cumsum(fwd)])
        self.bwd = np.concatenate([[0.0], np.cumsum(fwd[::-1])])
        self.total = float(self.fwd[-1])

    def _F(self, o):
        o = np.asarray(o, dtype=float)
        shape = o.shape
        r = np.atleast_1d(o) * self.M
        out = np.empty_like(r)
        pos = r >= 0
        k = np.floor(r[pos]).astype(np.int64)
        n_p, kk = np.divmod(k, self.M)
        out[pos] = n_p * self.total + self.fwd[kk] + (r[pos] - k) * self.m[(self.i + kk) % self.M]
        neg = ~pos
        if neg.any():
            kc = np.ceil(r[neg]).astype(np.int64)  # <= 0
            n_n, kn = np.divmod(-kc, self.M)
            out[neg] = -(n_n * self.total + self.bwd[kn]) - (kc - r[neg]) * self.m[(self.i + kc - 1) % self.M]
        return out.reshape(shape)

    def mass(self, a, b):
        """Mass of x + [a, b]; offsets may be arrays."""
        return self._F(b) - self._F(a)

    def mass_minus_centre(self, a, b, beta):
        """Mass of (x + [a, b]) minus (x + [-beta, beta])."""
        full = self.mass(a, b)
        lo = np.maximum(a, -beta)
        hi = np.minimum(b, beta)
        cut = np.where(hi > lo, self.mass(lo, np.where(hi > lo, hi, lo)), 0.0)
        return full - cut


def _masses_of(measure):
    return measure.masses if isinstance(measure, MeasureSample) else np.asarray(measure)


# ---------------------------------------------------------------------------
# shape and size events on one measure

def _dyadic_sum(om: OffsetMass, fam: IntervalFamily, t, denom, max_terms=1 << 22):
    """sum_m sum_{l in S(m)} mass(x + I_{m,l,t})^2 / denom^2 with a geometric tail.

    Levels are summed exactly while the intervals resolve the grid (length at
    least a quarter cell); from there on each level is half the previous one.
    """
    R = fam.r(t)
    r = fam.r(t + 0.25)
    cell = 1.0 / om.M
    total = 0.0
    m = 0
    while True:
        ell = dyadic_index_set(m, r, R)
        a, b = fam.I(m, ell, t)
        level = float(np.sum(om.mass(a, b) ** 2)) / denom**2
        total += level
        if R * 2.0**-m < cell / 4 or 2 * ell.size > max_terms:
            return total + level
        m += 1


def shape_event(measure, i: int, t, rho: float, constants: dict | None = None, detail: bool = False):
    """Shape event for the full measure around grid point i at scale t."""
    c = constants_table(constants)["Shape"]
    check_quarter(t)
    om = OffsetMass(_masses_of(measure), i)
    fam = IntervalFamily(rho)
    b = om.mass(*fam.B(t))
    ells = np.arange(1, 9)
    j_min = float(np.min(om.mass(*fam.J(t, ells)))) / b
    inner = float(om.mass(*fam.B(t + 0.25, 2))) / b
    double = float(om.mass(*fam.B(t, 2))) / b
    dyad = _dyadic_sum(om, fam, t, b)
    parts = {"J": j_min >= c["J"], "inner": inner <= c["inner"], "double": double <= c["double"],
             "dyadic": dyad <= c["dyadic"]}
    ok = all(parts.values())
    if detail:
        return ok, {"values": {"J": j_min, "inner": inner, "double": double, "dyadic": dyad}, "parts": parts}
    return ok


def shape_red_event(restricted, i: int, t, rho: float, constants: dict | None = None, detail: bool = False):
    """Reduced shape event for the restricted measure tau_t around grid point i."""
    c = constants_table(constants)["ShapeRed"]
    tq = check_quarter(t)
    om = OffsetMass(_masses_of(restricted), i)
    fam = IntervalFamily(rho)
    beta = fam.r(float(int(tq)) + 0.75)
    base = float(om.mass_minus_centre(*fam.B(t), beta))
    scaled = base * rho ** (-float(t))
    ells = np.arange(1, 9)
    ja, jb = fam.J(t, ells)
    j_min = float(np.min(om.mass_minus_centre(ja, jb, beta))) / base
    inner = float(om.mass_minus_centre(*fam.B(t + 0.25, 2), beta)) / base
    double = float(om.mass_minus_centre(*fam.B(t, 2), beta)) / base
    dyad = _dyadic_sum(om, fam, t, base)
    parts = {"mass": c["mass_lo"] <= scaled <= c["mass_hi"], "J": j_min >= c["J"], "inner": inner <= c["inner"],
             "double": double <= c["double"], "dyadic": dyad <= c["dyadic"]}
    ok = all(parts.values())
    if detail:
        return ok, {"values": {"mass": scaled, "J": j_min, "inner": inner, "double": double, "dyadic": dyad},
                    "parts": parts}
    return ok


def _le_pow2(q: Fraction, c) -> bool:
    """2**q <= c, exact when c is a power of two."""
    c = Fraction(c)
    n, d = c.numerator, c.denominator
    if n & (n - 1) == 0 and d & (d - 1) == 0:
        return q <= (n.bit_length() - 1) - (d.bit_length() - 1)
    if q.denominator == 1:
        return Fraction(2) ** int(q) <= c
    raise DomainError("exact comparison needs a power-of-two constant or an integer exponent")


def lebesgue_shape(e, t, constants: dict | None = None, detail: bool = False, levels: int = 200):
    """Shape event for Lebesgue measure with rho = 2**-e, in exact arithmetic.

    Each ratio is a power of two or a rational number; the dyadic sum is
    bracketed between its exact partial sum and that sum plus a rational tail
    bound.
    """
    c = constants_table(constants)["Shape"]
    e = Fraction(e)
    t = check_quarter(t)
    if e <= 0:
        raise DomainError("need rho < 1")
    if e * t < 2:
        raise DomainError("need 4 rho^t <= 1 so that 2 B_t fits in the circle")
    j_ratio = Fraction(1, 8)
    inner_exp = 1 - e / 4  # log2 of 2 rho^(1/4)
    double = Fraction(2)
    q = e / 4  # r / R = 2**-q
    partial = sum(dyadic_count(m, q) * Fraction(4) ** (1 - m) for m in range(levels))
    tail = Fraction(8, 2**(levels - 1)) + Fraction(8, 3 * 4**(levels - 1))
    dyadic_ok = partial + tail <= Fraction(c["dyadic"])
    if not dyadic_ok and partial <= Fraction(c["dyadic"]):
        raise DomainError("dyadic sum too close to the threshold; increase levels")
    parts = {"J": j_ratio >= Fraction(c["J"]), "inner": _le_pow2(inner_exp, c["inner"]),
             "double": double <= Fraction(c["double"]), "dyadic": dyadic_ok}
    ok = all(parts.values())
    if detail:
        return ok, {"values": {"J": j_ratio, "inner_log2": inner_exp, "double": double,
                               "dyadic_bounds": (partial, partial + tail)}, "parts": parts}
    return ok


def size_event(m1, m2, x: int, y: int, t, s, rho: float, constants: dict | None = None) -> bool:
    c = constants_table(constants)["Size"]
    a, b = OffsetMass(_masses_of(m1), x), OffsetMass(_masses_of(m2), y)
    fam = IntervalFamily(rho)
    ratio = (a.mass(*fam.B(t)) / a.total) / (b.mass(*fam.B(s)) / b.total)
    return bool(c["lo"] <= ratio <= c["hi"])


def centre_event(m2, y: int, N: int, rho: float, eps: float = 1.0, constants: dict | None = None) -> bool:
    c = constants_table(constants)["Centre"]
    b = OffsetMass(_masses_of(m2), y)
    fam = IntervalFamily(rho)
    num = b.mass(0.0, rho ** ((1 + eps) * 5 * N))
    den = b.mass(*fam.B(5 * N + 1))
    return bool(num / den <= c["ratio"])


def match_event(m1, m2, x: int, y: int, N: int, rho: float, eps: float = 1.0) -> bool:
    """psi_1(x) lies in psi_2([y, y + rho^((1+eps)5N)))."""
    a, b = _masses_of(m1), _masses_of(m2)
    M1, M2 = a.size, b.size
    p1 = np.sum(a[: x % M1]) / a.sum()
    p2 = np.sum(b[: y % M2]) / b.sum()
    width = OffsetMass(b, y).mass(0.0, rho ** ((1 + eps) * 5 * N)) / b.sum()
    return bool(0.0 <= p1 - p2 < width)


def ann_prime_event(m1, m2, x, t, y, s, N, rho, eps=1.0, constants=None) -> bool:
    return (size_event(m1, m2, x, y, t, s, rho, constants) and shape_event(m1, x, t, rho, constants)
            and shape_event(m2, y, s, rho, constants) and centre_event(m2, y, N, rho, eps, constants))


# ---------------------------------------------------------------------------
# field driven events

def _window(M: int, i: int, half: float) -> np.ndarray:
    k = int(np.floor(half * M + 1e-9))
    return (i + np.arange(-k, k + 1)) % M


def x_processes(stacks, x: int, y: int, t, s, gamma: float, rho: float | None = None):
    """(X^H_{t,s}, X^V_{t,s}) at grid points x, y; stacks may carry replica axes."""
    s1, s2 = stacks
    rho = s1.rho if rho is None else rho
    L = np.log(1 / rho)
    h1 = field_at_scale(s1, t, "H")[..., x]
    h2 = field_at_scale(s2, s, "H")[..., y]
    v1 = field_at_scale(s1, t, "V")[..., x]
    v2 = field_at_scale(s2, s, "V")[..., y]
    var_t = point_variance("H", rho, float(t))
    var_s = point_variance("H", rho, float(s))
    xh = gamma * h1 - gamma * h2 - gamma**2 / 2 * (var_t - var_s) - (float(t) - float(s)) * L
    xv = gamma * v1 - gamma * v2 - (gamma**2 / 2 + 1) * (float(t) - float(s)) * L
    return xh, xv


def upp_event(stack: FieldStack, i: int, n: int, gamma: float, constants=None, detail=False):
    """Upp_n: upper-scale increments over x + 2 B_n stay within 2^{k-n} log 2 of their value at x."""
    c = constants_table(constants)["Upp"]
    idx = _window(stack.M, i, 2 * stack.rho**n)
    worst = []
    ok = True
    for k in range(-1, n):
        if k == -1:
            inc = field_at_scale(stack, 0, "H")
        else:
            inc = field_at_scale(stack, k + 1, "H") - field_at_scale(stack, k, "H")
        d = gamma * (inc[..., idx] - inc[..., i : i + 1])
        bound = 2.0 ** (k - n) * c["bound"]
        hi, lo = float(np.max(d)), float(np.min(d))
        ok &= hi <= bound and lo >= -bound
        worst.append((k, hi, lo, bound))
    return (ok, worst) if detail else ok


def frac_event(stack: FieldStack, i: int, n: int, gamma: float, constants=None) -> bool:
    """Frac_n: |log E(u, rho^t, rho^n)| < log 2 for lattice t in [n, n + 1/2], u in x + 2 B_n."""
    c = constants_table(constants)["Frac"]
    idx = _window(stack.M, i, 2 * stack.rho**n)
    base = field_at_scale(stack, n, "H")[..., idx]
    var_n = point_variance("H", stack.rho, n)
    worst = 0.0
    for q in range(1, stack.substeps // 2 + 1):
        t = n + q / stack.substeps
        val = gamma * (field_at_scale(stack, t, "H")[..., idx] - base) - gamma**2 / 2 * (
            point_variance("H", stack.rho, t) - var_n)
        worst = max(worst, float(np.max(np.abs(val))))
    return worst < c["bound"]


def low_event(restricted_n, i: int, n: int, rho: float, constants=None, k_max: int | None = None) -> bool:
    """Low_n for the restricted measure tau_n; k runs until B_{k+3/4} is a tenth of a cell."""
    c = constants_table(constants)["Low"]
    om = OffsetMass(_masses_of(restricted_n), i)
    fam = IntervalFamily(rho)
    den = om.mass_minus_centre(*fam.B(n + 0.5), fam.r(n + 0.75))
    if k_max is None:
        k_max = n
        while rho ** (k_max + 0.75) * om.M > 0.1:
            k_max += 1
    for k in range(n, k_max + 1):
        num = om.mass_minus_centre(*fam.B(k + 0.75), fam.r(k + 1.75))
        if num / den > 2.0 ** (n - k + c["exponent"]):
            return False
    return True


def scal_event(world, N: int, constants=None) -> bool:
    c = constants_table(constants)["Scal"]
    s1, s2 = world.stacks
    fam = IntervalFamily(world.rho)
    a = OffsetMass(_masses_of(world.measures[0]), world.x)
    b = OffsetMass(_masses_of(world.measures[1]), world.y)
    if not (a.mass(*fam.B(N)) / a.total < c["ratio"] and b.mass(*fam.B(N)) / b.total < c["ratio"]):
        return False
    g, L = world.gamma, np.log(1 / world.rho)

    def path(st, i):
        ts = [N + q / st.substeps for q in range(4 * N * st.substeps + 1)]
        return np.array([g * (field_at_scale(st, t, "H")[i] - field_at_scale(st, t, "V")[i])
                         - g**2 / 2 * point_variance("H", world.rho, t) + g**2 / 2 * t * L for t in ts])

    pa = path(s1, world.x)
    pb = path(s2, world.y)
    pa, pb = pa - pa[0], pb - pb[0]
    sup = max(abs(pa.max() - pb.min()), abs(pa.min() - pb.max()))
    return sup < c["bound"]


def size_red_event(world, t, s, N: int, constants=None) -> bool:
    c = constants_table(constants)["SizeRed"]
    fam = IntervalFamily(world.rho)
    xh_nn, xv_nn = x_processes(world.stacks, world.x, world.y, N, N, world.gamma, world.rho)
    _, xv = x_processes(world.stacks, world.x, world.y, t, s, world.gamma, world.rho)
    a = OffsetMass(_masses_of(world.measures[0]), world.x)
    b = OffsetMass(_masses_of(world.measures[1]), world.y)
    ratio = (b.total - b.mass(*fam.B(N))) / (a.total - a.mass(*fam.B(N)))
    return bool(abs(xv - xv_nn + xh_nn + np.log(ratio)) <= c["bound"])


# ---------------------------------------------------------------------------
# evaluation against a sampled world

@dataclass
class World:
    """One replica: two measures, their field stacks and the points x, y (grid indices)."""

    measures: tuple
    stacks: tuple | None
    gamma: float
    rho: float
    x: int = 0
    y: int = 0
    eps: float = 1.0
    _restricted: dict = field(default_factory=dict, repr=False)

    def restricted(self, j: int, t):
        key = (j, float(t))
        if key not in self._restricted:
            if self.stacks is None:
                raise DomainError("restricted measures need field stacks")
            self._restricted[key] = build_restricted_measure(self.stacks[j - 1], self.gamma, t, "tau_t")
        return self._restricted[key]

    def point(self, j):
        return self.x if j == 1 else self.y


@dataclass
class EventSpec:
    name: str
    params: dict = field(default_factory=dict)
    constants: dict | None = None

    def __post_init__(self):
        if self.name not in EVENT_NAMES:
            raise DomainError(f"unknown event {self.name!r}")


def _need(params, *keys):
    missing = [k for k in keys if k not in params]
    if missing:
        raise DomainError(f"missing parameters {missing}")
    return [params[k] for k in keys]


def evaluate_event(spec: EventSpec, world: World) -> bool:
    p, c, w = spec.params, spec.constants, world
    name = spec.name
    if name in ("Shape1", "Shape2"):
        j = 1 if name == "Shape1" else 2
        (t,) = _need(p, "t")
        return bool(shape_event(w.measures[j - 1], w.point(j), t, w.rho, c))
    if name in ("ShapeRed1", "ShapeRed2"):
        j = 1 if name == "ShapeRed1" else 2
        (t,) = _need(p, "t")
        return bool(shape_red_event(w.restricted(j, t), w.point(j), t, w.rho, c))
    if name == "Size":
        t, s = _need(p, "t", "s")
        return size_event(w.measures[0], w.measures[1], w.x, w.y, t, s, w.rho, c)
    if name == "Centre":
        (N,) = _need(p, "N")
        return centre_event(w.measures[1], w.y, N, w.rho, p.get("eps", w.eps), c)
    if name == "Match":
        (N,) = _need(p, "N")
        return match_event(w.measures[0], w.measures[1], w.x, w.y, N, w.rho, p.get("eps", w.eps))
    if name == "AnnPrime":
        t, s, N = _need(p, "t", "s", "N")
        return ann_prime_event(w.measures[0], w.measures[1], w.x, t, w.y, s, N, w.rho, p.get("eps", w.eps), c)
    if name == "SizeRed":
        t, s, N = _need(p, "t", "s", "N")
        return size_red_event(w, t, s, N, c)
    if name in ("Upp", "Frac", "Low"):
        n = _need(p, "n")[0]
        j = p.get("j", 1)
        if w.stacks is None:
            raise DomainError(f"{name} needs field stacks")
        if name == "Upp":
            return bool(upp_event(w.stacks[j - 1], w.point(j), n, w.gamma, c))
        if name == "Frac":
            return frac_event(w.stacks[j - 1], w.point(j), n, w.gamma, c)
        return low_event(w.restricted(j, n), w.point(j), n, w.rho, c, p.get("k_max"))
    (N,) = _need(p, "N")
    return scal_event(w, N, c)


# ---------------------------------------------------------------------------
# frequencies

def wilson_ci(k: int, n: int, level: float = 0.95):
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def event_frequency(specs, ensemble, replicas: int | None = None, N: int | None = None):
    """Empirical rate and Wilson interval of each event over the ensemble of worlds.

    A spec with params n='all' is an indexed family: it is evaluated for
    n = 1..5N and the per-replica count of successes is reported as well.
    """
    worlds = list(ensemble)[: replicas] if replicas else list(ensemble)
    R = len(worlds)
    if R < 100:
        raise DomainError("need at least 100 replicas")
    table = []
    for spec in specs:
        if spec.params.get("n") == "all":
            if N is None:
                raise DomainError("indexed families need N")
            hits = np.zeros((R, 5 * N), dtype=bool)
            for r, w in enumerate(worlds):
                for n in range(1, 5 * N + 1):
                    sp = EventSpec(spec.name, {**spec.params, "n": n}, spec.constants)
                    hits[r, n - 1] = evaluate_event(sp, w)
            k = hits.sum(axis=0)
            rows = [{"n": n, "rate": float(k[n - 1] / R), "ci": wilson_ci(k[n - 1], R)} for n in range(1, 5 * N + 1)]
            counts = hits.sum(axis=1)
            table.append({"event": spec.name, "params": {**spec.params}, "indexed": rows,
                          "count_mean": float(counts.mean()), "count_max": 5 * N,
                          "rate": float(hits.mean()), "ci": wilson_ci(int(hits.sum()), hits.size),
                          "replicas": R})
            continue
        hits = np.array([evaluate_event(spec, w) for w in worlds])
        k = int(hits.sum())
        table.append({"event": spec.name, "params": dict(spec.params), "rate": k / R, "ci": wilson_ci(k, R),
                      "replicas": R})
    return table


def event_report(table, constants=None, grid=None):
    """JSON-ready rows {event, params, constants, rate, ci, replicas, grid}."""
    consts = constants_table(constants)
    out = []
    for row in table:
        group = row["event"].rstrip("12")
        out.append({**row, "constants": consts.get(group, {}), "grid": grid or {}})
    return out


def indicator_correlation(a, b):
    """Sample correlation of two indicator vectors and its null standard error 1/sqrt(n)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.std() == 0 or b.std() == 0:
        raise DomainError("an indicator is constant; correlation undefined")
    r = float(np.corrcoef(a, b)[0, 1])
    return r, 1.0 / np.sqrt(a.size)


# ---------------------------------------------------------------------------
# measure comparison field U = (H_delta - H_r) - (V_delta - V_r)

def u_field_sup(stack: FieldStack, t_r):
    """sup over lattice delta < rho^t_r and grid points of |U_delta^r|, per replica."""
    q0 = stack.step_of(t_r)
    best = 0.0
    hr = field_at_scale(stack, t_r, "H")
    vr = field_at_scale(stack, t_r, "V")
    for q in range(q0 + 1, stack.n_steps + 1):
        t = q / stack.substeps
        u = (field_at_scale(stack, t, "H") - hr) - (field_at_scale(stack, t, "V") - vr)
        best = np.maximum(best, np.max(np.abs(u), axis=-1))
    return best


def u_variance(delta: float, r: float) -> float:
    """Var U_delta^r(0): area of (V minus H) between heights delta and r <= 1/2."""
    from .whitenoise_fields import slab_overlap_area
    return slab_overlap_area("V", delta, r, 0.0) - slab_overlap_area("H", delta, r, 0.0)


def u_envelope(u, r):
    u = np.asarray(u, dtype=float)
    return (1 + u**6 / r**12) * np.exp(-(u**2) / (2 * r**2))


def envelope_check(samples, r, fit_probes, test_probes):
    """Fit C2 = max rate / envelope on fit probes, then compare held-out probes."""
    samples = np.asarray(samples)
    rate = lambda u: float(np.mean(samples > u))
    c2 = max(rate(u) / u_envelope(u, r) for u in fit_probes)
    rows = [{"u": float(u), "rate": rate(u), "bound": float(c2 * u_envelope(u, r))} for u in test_probes]
    return c2, rows, all(row["rate"] <= row["bound"] for row in rows)
