"""Periodic hyperbolic white noise on the circle, sampled scale by scale.

The control measure is dx dy / y**2 on the upper half-plane.  Two cone-like
regions are used:

* ``H``: |x| < 1/2 and y >= (2/pi) tan(pi |x|), half-width (1/pi) arctan(pi y / 2)
* ``V``: 2|x| <= y <= 1/2, half-width y/2 below height 1/2

A field value at x is the noise mass of the translated region, cut off below
some height.  Cutting the region into horizontal slabs gives independent
Gaussian layers whose periodic covariance is the area of overlap of a slab
with its translates.  Each layer is sampled exactly on the grid by circulant
embedding.  Below height 1/2 the H region lies inside the V region, so the H
and V slabs at one height are sampled jointly from the 2 x 2 spectral matrix
built from the H, V and cross overlap areas.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize

KINDS = ("H", "V")

# y0 = pi/2 is the slope of arctan in the H boundary curve
_A = np.pi / 2
_P_INF = -np.log(np.pi / 2)
EIG_TOL = 1e-9


class DomainError(ValueError):
    pass


class CovarianceError(RuntimeError):
    pass


def _check_kind(kind):
    if kind not in KINDS:
        raise DomainError(f"unknown region kind {kind!r}")


def region_halfwidth(kind: str, y):
    """Half-width of the horizontal cross-section of the region at height y."""
    _check_kind(kind)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DomainError("height must be positive")
    if kind == "H":
        out = np.arctan(_A * y) / np.pi
    else:
        out = np.where(y <= 0.5, y / 2, 0.0)
    return out if out.ndim else float(out)


def _circle_dist(t):
    t = float(t) % 1.0
    return min(t, 1.0 - t)


def _h_prim(y):
    # antiderivative of (2/pi) arctan(a y) / y**2
    return (2 / np.pi) * (-np.arctan(_A * y) / y + _A * (np.log(y) - 0.5 * np.log1p((_A * y) ** 2)))


def _single_overlap(kind, c, a, b):
    """int_a^b max(0, 2 w(y) - c) y**-2 dy for one translate at distance c."""
    if kind == "H":
        if c >= 1.0:
            return 0.0
        yc = (2 / np.pi) * np.tan(np.pi * c / 2)
        lo = max(a, yc)
        hi = b
        if lo >= hi:
            return 0.0
        if lo == 0.0:
            return np.inf
        top = _P_INF if np.isinf(hi) else _h_prim(hi)
        inv_hi = 0.0 if np.isinf(hi) else 1.0 / hi
        return max(top - _h_prim(lo) - c * (1.0 / lo - inv_hi), 0.0)
    lo = max(a, c)
    hi = min(b, 0.5)
    if lo >= hi:
        return 0.0
    if lo == 0.0:
        return np.inf
    return max(np.log(hi / lo) + c * (1.0 / hi - 1.0 / lo), 0.0)


def _v_minus_h(y):
    # V half-width minus H half-width, increasing on (0, 1/2]
    return y / 2 - np.arctan(_A * y) / np.pi


def _v_plus_h(y):
    return y / 2 + np.arctan(_A * y) / np.pi


def _root(fun, c):
    # smallest y in (0, 1/2] with fun(y) >= c, or inf if none
    if fun(0.5) < c:
        return np.inf
    if c <= 0 or fun(1e-300) >= c:
        return 0.0
    return optimize.brentq(lambda y: fun(y) - c, 1e-300, 0.5, xtol=1e-15, rtol=1e-15)


def _cross_single(c, a, b):
    """int_a^b |H_y cap (V_y + c)| y**-2 dy for one translate at distance c >= 0."""
    hi = min(b, 0.5)
    y2 = _root(_v_plus_h, c)
    y1 = _root(_v_minus_h, c)
    total = 0.0
    # partial overlap a(y) + b(y) - c on [y2, y1)
    lo_p, hi_p = max(a, y2), min(hi, y1)
    if lo_p < hi_p:
        if lo_p == 0.0:
            return np.inf
        total += 0.5 * (_h_prim(hi_p) - _h_prim(lo_p)) + 0.5 * np.log(hi_p / lo_p) - c * (1 / lo_p - 1 / hi_p)
    # H section inside the V section on [y1, hi)
    lo_f = max(a, y1)
    if lo_f < hi:
        if lo_f == 0.0:
            return np.inf
        total += _h_prim(hi) - _h_prim(lo_f)
    return max(total, 0.0)


def cross_overlap_area(a: float, b: float, t: float) -> float:
    """Covariance of the H slab a <= y < b at 0 with the V slab at t."""
    _check_slab(a, b)
    d = _circle_dist(t)
    return _cross_single(d, a, b) + _cross_single(1.0 - d, a, b)


def cross_overlap_quad(a: float, b: float, t: float, tol: float = 1e-10) -> float:
    """Quadrature version of cross_overlap_area."""
    _check_slab(a, b)
    d = _circle_dist(t)

    def width(y, c):
        ha = region_halfwidth("H", y)
        hb = region_halfwidth("V", y)
        if hb == 0:
            return 0.0
        return max(0.0, min(ha, c + hb) - max(-ha, c - hb))

    hi = min(b, 0.5)
    if a >= hi:
        return 0.0
    pts = [p for p in (_root(_v_plus_h, d), _root(_v_minus_h, d)) if a < p < hi]
    val, _ = integrate.quad(lambda y: (width(y, d) + width(y, 1 - d)) / y**2, a, hi,
                            points=pts or None, epsabs=tol, epsrel=0, limit=200)
    return val


def _check_slab(a, b):
    if not (0 <= a < b):
        raise DomainError(f"need 0 <= a < b, got a={a}, b={b}")


def slab_overlap_area(kind: str, a: float, b: float, t: float) -> float:
    """Covariance of the slab a <= y < b of the region with its translate by t.

    Periodic copies are included.  Since the region is narrower than the
    circle only the two nearest copies can overlap.
    """
    _check_kind(kind)
    _check_slab(a, b)
    d = _circle_dist(t)
    return _single_overlap(kind, d, a, b) + _single_overlap(kind, 1.0 - d, a, b)


def slab_overlap_quad(kind: str, a: float, b: float, t: float, tol: float = 1e-10) -> float:
    """Same quantity by adaptive quadrature of the overlap integrand."""
    _check_kind(kind)
    _check_slab(a, b)
    d = _circle_dist(t)

    def integrand(y):
        w2 = 2 * region_halfwidth(kind, y)
        return (max(0.0, w2 - d) + max(0.0, w2 - (1 - d))) / y**2

    # integrand vanishes below the height where the translate starts to overlap
    if kind == "H":
        start = (2 / np.pi) * np.tan(np.pi * d / 2)
        stop = b
    else:
        start, stop = d, min(b, 0.5)
    lo = max(a, start)
    if lo >= stop:
        return 0.0
    if lo == 0.0:
        return np.inf
    if np.isinf(stop):
        # split so the finite part sees the kink of the second copy
        mid = max(lo, 1.0) * 4
        v1, _ = integrate.quad(integrand, lo, mid, epsabs=tol, epsrel=0, limit=200)
        v2, _ = integrate.quad(integrand, mid, np.inf, epsabs=tol, epsrel=0, limit=200)
        return v1 + v2
    val, _ = integrate.quad(integrand, lo, stop, epsabs=tol, epsrel=0, limit=200)
    return val


def log_kernel(t):
    """Limit covariance 2 log 2 + log(1 / (2 sin(pi t))) of the full H field."""
    t = np.asarray(t, dtype=float)
    return 2 * np.log(2) + np.log(1 / (2 * np.sin(np.pi * t)))


def scale_edges(rho: float, depth: int, substeps: int = 1) -> np.ndarray:
    """Heights inf, 1, rho**(1/s), ..., rho**depth bounding the layers."""
    q = np.arange(depth * substeps + 1)
    return np.concatenate([[np.inf], rho ** (q / substeps)])


@lru_cache(maxsize=512)
def layer_covariance(kind: str, lo: float, hi: float, M: int) -> np.ndarray:
    i = np.arange(M)
    d = np.minimum(i, M - i) / M
    return np.array([slab_overlap_area(kind, lo, hi, x) for x in d])


@lru_cache(maxsize=512)
def cross_covariance(lo: float, hi: float, M: int) -> np.ndarray:
    i = np.arange(M)
    d = np.minimum(i, M - i) / M
    return np.array([cross_overlap_area(lo, hi, x) for x in d])


def _check_eig(lam, what):
    scale = max(1.0, float(np.max(lam)))
    if np.min(lam) < -EIG_TOL * scale:
        raise CovarianceError(f"circulant eigenvalue {np.min(lam):.3e} for {what}")
    return np.clip(lam, 0.0, None)


@lru_cache(maxsize=512)
def _layer_root(kind, lo, hi, M):
    lam = _check_eig(np.fft.rfft(layer_covariance(kind, lo, hi, M)).real, f"{kind} slab [{lo}, {hi}) at M={M}")
    return np.sqrt(lam)


@lru_cache(maxsize=512)
def _joint_root(lo, hi, M):
    """Lower triangular factor per frequency of the (H, V) spectral matrix of one slab."""
    lh = _check_eig(np.fft.rfft(layer_covariance("H", lo, hi, M)).real, f"H slab [{lo}, {hi})")
    lv = _check_eig(np.fft.rfft(layer_covariance("V", lo, hi, M)).real, f"V slab [{lo}, {hi})")
    lx = np.fft.rfft(cross_covariance(lo, hi, M)).real
    l11 = np.sqrt(lh)
    with np.errstate(divide="ignore", invalid="ignore"):
        l21 = np.where(l11 > 0, lx / l11, 0.0)
    l22 = np.sqrt(_check_eig(lv - l21**2, f"joint slab [{lo}, {hi}) at M={M}"))
    return l11, l21, l22


@dataclass
class FieldStack:
    """Layered field samples.  Arrays may carry leading replica axes.

    ``H[..., 0, :]`` is the top layer H_1; ``H[..., q + 1, :]`` is the slab
    between rho**((q+1)/s) and rho**(q/s).  ``V[..., q, :]`` is the same slab
    of the V region (V has no mass above height 1, so it has no top layer).
    """

    M: int
    rho: float
    depth: int
    substeps: int
    H: np.ndarray
    V: np.ndarray
    G: np.ndarray
    seed: object = None
    _cum: dict = dc_field(default_factory=dict, repr=False, compare=False)

    @property
    def n_steps(self):
        return self.depth * self.substeps

    def step_of(self, t) -> int:
        """Index q with t = q / substeps, rejecting off-lattice scales."""
        q = float(t) * self.substeps
        qi = int(round(q))
        if abs(q - qi) > 1e-9 or qi < 0 or qi > self.n_steps:
            raise DomainError(f"scale {t} not on the lattice (1/{self.substeps}) up to depth {self.depth}")
        return qi

    def _cumulative(self, kind):
        if kind not in self._cum:
            arr = self.H if kind == "H" else self.V
            self._cum[kind] = np.cumsum(arr, axis=-2)
        return self._cum[kind]


def sample_field_stack(M: int, rho: float, depth: int, seed: int, substeps: int = 1,
                       replicas: int | None = None, first_replica: int = 0,
                       with_v: bool = True) -> FieldStack:
    """Sample H and V layers on the grid of M points.

    Replica r draws from its own stream seeded by (seed, r), so batches can be
    split freely without changing any sample.  With ``with_v=False`` the V
    layers are left as zeros and no normals are spent on them; the H layers
    are unchanged.
    """
    if M < 2 or M & (M - 1):
        raise DomainError("M must be a power of two")
    if not 0 < rho < 1:
        raise DomainError("rho must lie in (0, 1)")
    if depth < 0 or substeps < 1:
        raise DomainError("depth must be >= 0 and substeps >= 1")
    edges = scale_edges(rho, depth, substeps)
    n_h = len(edges) - 1
    n_v = n_h - 1
    root_h = np.array([_layer_root("H", edges[q + 1], edges[q], M) for q in range(n_h)])
    with_v = with_v and n_v > 0
    if with_v:
        # H layer q + 1 and V layer q cover the same slab and share its noise
        joint = [_joint_root(edges[q + 2], edges[q + 1], M) for q in range(n_v)]
        l21 = np.array([j[1] for j in joint]).reshape(n_v, -1)
        l22 = np.array([j[2] for j in joint]).reshape(n_v, -1)

    R = 1 if replicas is None else replicas
    zh = np.empty((R, n_h, M))
    zv = np.zeros((R, n_v, M))
    G = np.empty(R)
    for r in range(R):
        # order of draws per replica: G, H layers, then V layers
        rng = np.random.default_rng([int(seed), first_replica + r])
        G[r] = rng.standard_normal()
        zh[r] = rng.standard_normal((n_h, M))
        if with_v:
            zv[r] = rng.standard_normal((n_v, M))
    H = np.fft.irfft(root_h * np.fft.rfft(zh, axis=-1), n=M, axis=-1)
    if with_v:
        zh_f = np.fft.rfft(zh[:, 1:], axis=-1)
        V = np.fft.irfft(l21 * zh_f + l22 * np.fft.rfft(zv, axis=-1), n=M, axis=-1)
    else:
        V = zv
    G *= np.sqrt(2 * np.log(2))
    if replicas is None:
        H, V, G = H[0], V[0], G[0]
    return FieldStack(M, rho, depth, substeps, H, V, G, seed=int(seed))


def field(stack: FieldStack, t: float, kind: str = "H") -> np.ndarray:
    """H_{rho^t} (or V_{rho^t}) at every grid point."""
    _check_kind(kind)
    q = stack.step_of(t)
    if kind == "H":
        return stack._cumulative("H")[..., q, :]
    if q == 0:
        return np.zeros(stack.V.shape[:-2] + (stack.M,))
    return stack._cumulative("V")[..., q - 1, :]


def field_at(stack: FieldStack, i: int, k: float, kind: str = "H"):
    if not 0 <= i < stack.M:
        raise IndexError(f"grid index {i} out of range")
    return field(stack, k, kind)[..., i]


def increment(stack: FieldStack, t_fine: float, t_coarse: float, kind: str = "H") -> np.ndarray:
    """Field between heights rho**t_fine and rho**t_coarse."""
    return field(stack, t_fine, kind) - field(stack, t_coarse, kind)


def point_variance(kind: str, rho: float, t: float, t_top: float | None = None) -> float:
    """Variance of the field cut off at rho**t, optionally truncated above rho**t_top."""
    hi = np.inf if t_top is None else rho**t_top
    return slab_overlap_area(kind, rho**t, hi, 0.0)


def v_covariance(delta: float, r: float, dist: float) -> float:
    """Covariance of V between heights delta and r <= 1/2 at two points dist apart."""
    if not 0 < delta <= r <= 0.5:
        raise DomainError("need 0 < delta <= r <= 1/2")
    u = abs(dist)
    if u <= delta:
        return np.log(r / delta) - u * (1 / delta - 1 / r)
    if u <= r:
        return np.log(r / u) - 1 + u / r
    return 0.0


# ---------------------------------------------------------------------------
# ensemble covariance check

def default_offsets(M: int, count: int = 48) -> np.ndarray:
    """Offset 0 plus roughly geometric offsets up to M / 2 (in grid steps)."""
    k = np.unique(np.round(np.geomspace(1, M // 2, count)).astype(int))
    return np.concatenate([[0], k])


def empirical_covariance(M: int, rho: float, depth: int, seed: int, replicas: int, offsets,
                         kind: str = "H", batch: int = 500):
    """Mean and standard error of the grid-averaged product f(x) f(x + k/M) at the cutoff rho**depth.

    Each replica contributes one number per offset (its average over the
    grid), so the standard error is taken across independent replicas.
    """
    _check_kind(kind)
    offsets = np.asarray(offsets, dtype=int)
    s1 = np.zeros(offsets.size)
    s2 = np.zeros(offsets.size)
    done = 0
    while done < replicas:
        b = min(batch, replicas - done)
        st = sample_field_stack(M, rho, depth, seed, replicas=b, first_replica=done, with_v=(kind == "V"))
        f = np.fft.rfft(field(st, depth, kind), axis=-1)
        ac = np.fft.irfft(np.abs(f) ** 2, n=M, axis=-1)[:, offsets] / M
        s1 += ac.sum(axis=0)
        s2 += (ac**2).sum(axis=0)
        done += b
    mean = s1 / replicas
    var = (s2 - replicas * mean**2) / (replicas - 1)
    return mean, np.sqrt(np.maximum(var, 0.0) / replicas)


def covariance_check(M: int, rho: float, depth: int, seed: int, replicas: int, offsets=None,
                     batch: int = 500, z_max: float = 3.0) -> dict:
    """Empirical H and V covariances against the quadrature and closed-form values.

    H rows compare with slab_overlap_quad over [rho**depth, inf).  V rows
    compare with v_covariance(rho**depth, 1/2, dist), cross-checked by
    quadrature; the V part is skipped when rho**depth > 1/2.  The V point
    variance log(1/(2 xi)) is reported next to -log(xi), with their log 2 gap.
    """
    offsets = default_offsets(M) if offsets is None else np.asarray(offsets, dtype=int)
    xi = rho**depth
    out = {"M": M, "rho": rho, "depth": depth, "replicas": replicas, "z_max": z_max}
    mean, se = empirical_covariance(M, rho, depth, seed, replicas, offsets, "H", batch)
    rows = []
    for k, m, s in zip(offsets, mean, se):
        ref = slab_overlap_quad("H", xi, np.inf, k / M)
        z = (m - ref) / s if s > 0 else 0.0
        rows.append({"offset": int(k), "dist": k / M, "oracle": ref, "empirical": float(m), "se": float(s),
                     "z": float(z), "pass": bool(abs(z) <= z_max)})
    out["H"] = rows
    out["H_pass_fraction"] = float(np.mean([r["pass"] for r in rows]))
    if xi <= 0.5:
        mean, se = empirical_covariance(M, rho, depth, seed, replicas, offsets, "V", batch)
        rows = []
        for k, m, s in zip(offsets, mean, se):
            dist = min(k, M - k) / M
            ref = v_covariance(xi, 0.5, dist)
            quad = slab_overlap_quad("V", xi, 0.5, k / M)
            z = (m - ref) / s if s > 0 else 0.0
            rows.append({"offset": int(k), "dist": dist, "closed_form": ref, "quad": quad,
                         "regime": "near" if dist <= xi else ("mid" if dist <= 0.5 else "far"),
                         "empirical": float(m), "se": float(s), "z": float(z), "pass": bool(abs(z) <= z_max)})
        out["V"] = rows
        out["V_pass_fraction"] = float(np.mean([r["pass"] for r in rows]))
        out["V_variance"] = {"xi": xi, "region": float(np.log(1 / (2 * xi))), "minus_log_xi": float(-np.log(xi)),
                             "offset": float(np.log(2.0))}
    return out
