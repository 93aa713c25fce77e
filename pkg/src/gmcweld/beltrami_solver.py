"""Beltrami equation d_zbar F = mu_n d_z F by Neumann iteration.

Two discretizations share the same fixed point h = mu_n (1 + S h):

* planar: a square lattice, Beurling transform as the Fourier multiplier
  conj(xi)/xi; the Cauchy transform is computed on a twice padded lattice and
  the periodization error (a conj(z) term plus the entire part of the
  Weierstrass zeta function) is removed analytically from moments of h.
* strip: 1-periodic functions of w = x + iy with density supported in
  |y| < Y.  Trigonometric in x; in y each Fourier mode solves a first order
  ODE, integrated exactly for a cellwise constant density.  The mean mode has
  S = -1 exactly.

The module also carries the annulus estimates: modulus lower bound from
thickness and total distortion, the image half-annulus boxes and the dyadic
energy bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np
from scipy import ndimage

from .homeo_extension import GridField, HomeoExtension
from .whitenoise_fields import DomainError


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


class SupportError(DomainError):
    pass


# ---------------------------------------------------------------------------
# planar transforms

def _wavenumbers(n, h):
    k = 2 * np.pi * np.fft.fftfreq(n, d=h)
    k1, k2 = np.meshgrid(k, k)
    return k1 + 1j * k2


def _check_support(g: GridField, frac=0.25):
    ny, nx = g.values.shape
    nz = np.nonzero(g.values)
    if nz[0].size == 0:
        return
    py, px = int(frac * ny), int(frac * nx)
    if nz[0].min() < py or nz[0].max() >= ny - py or nz[1].min() < px or nz[1].max() >= nx - px:
        raise SupportError("field support is closer than a quarter box to the boundary")


def beurling_transform(g: GridField, check: bool = True) -> GridField:
    """Fourier multiplier conj(xi)/xi with the zero mode set to 0."""
    if check:
        _check_support(g)
    xi = _wavenumbers(g.values.shape[0], g.h)
    sym = np.zeros_like(xi)
    nz = xi != 0
    sym[nz] = np.conj(xi[nz]) / xi[nz]
    vals = np.fft.ifft2(np.fft.fft2(g.values) * sym)
    return GridField(g.box, g.h, vals, g.mask)


@lru_cache(maxsize=None)
def _lattice_sum(p: int, R: int = 600) -> float:
    # sum over nonzero Gaussian integers of w**-p; zero unless 4 | p
    m = np.arange(-R, R + 1)
    a, b = np.meshgrid(m, m)
    w = (a + 1j * b).ravel()
    w = w[w != 0]
    return float(np.sum(w ** (-float(p))).real)


def cauchy_transform(g: GridField, pad: int = 2, n_terms: int = 5, check: bool = True) -> GridField:
    """Free-space Cauchy transform (1/pi) int h(zeta) / (z - zeta) dA on the lattice."""
    if check:
        _check_support(g)
    n = g.values.shape[0]
    P = n * pad
    L = g.h * P
    o = (P - n) // 2
    fp = np.zeros((P, P), dtype=complex)
    fp[o:o + n, o:o + n] = g.values
    xi = _wavenumbers(P, g.h)
    sym = np.zeros_like(xi)
    nz = xi != 0
    sym[nz] = -2j / xi[nz]
    c = np.fft.ifft2(np.fft.fft2(fp) * sym)[o:o + n, o:o + n]

    z = g.coords()
    dA = g.h**2
    f = g.values
    # periodic kernel = (1/pi)(zeta_W(u) - pi conj(u)/A); restore 1/(pi u)
    c = c + (f.sum() * dA * np.conj(z) - (f * np.conj(z)).sum() * dA) / L**2
    zc = (f * z).sum() / f.sum() if abs(f.sum()) > 0 else 0.0
    u = z - zc
    powers = [(f * u**j).sum() * dA for j in range(4 * n_terms)]
    for q in range(1, n_terms + 1):
        p = 4 * q
        gl = _lattice_sum(p) / L**p
        deg = p - 1
        poly = sum(comb(deg, j) * u ** (deg - j) * (-1) ** j * powers[j] for j in range(deg + 1))
        c = c + gl * poly / np.pi
    return GridField(g.box, g.h, c, g.mask)


@dataclass
class BeltramiSolution:
    n: float | None
    F: GridField
    h_field: GridField
    residual_l2: float
    iterations: int
    contraction_estimate: float
    contraction_bound: float
    flagged: int = 0
    tol: float = 0.0
    increments: list = field(default_factory=list)


def truncation_factor(n):
    return 1.0 if n is None or n == np.inf else n / (n + 1.0)


def _contraction(incs):
    incs = [v for v in incs if v > 0]
    if len(incs) < 3:
        return 0.0
    r = np.array(incs[1:]) / np.array(incs[:-1])
    tail = r[len(r) // 2:]
    return float(np.exp(np.mean(np.log(tail))))


def _rms(a):
    return float(np.sqrt(np.mean(np.abs(a) ** 2)))


def solve_beltrami(mu: GridField, n=None, tol: float = 1e-10, max_iter: int = 500,
                   flagged: np.ndarray | None = None) -> BeltramiSolution:
    """Principal solution F = z + C h with h = mu_n (1 + S h)."""
    vals = np.array(mu.values, dtype=complex)
    if np.abs(vals).max(initial=0) > 1 + 1e-12:
        raise DomainError("|mu| must not exceed 1")
    n_flag = 0
    if flagged is not None:
        vals[flagged] = 0
        n_flag = int(np.count_nonzero(flagged))
    mun = truncation_factor(n) * vals
    if n is None and np.abs(mun).max(initial=0) >= 1:
        raise DomainError("untruncated solve needs |mu| < 1")
    base = GridField(mu.box, mu.h, mun)
    _check_support(base)
    h = mun.copy()
    incs = []
    it = 1
    for it in range(1, max_iter + 1):
        sh = beurling_transform(GridField(mu.box, mu.h, h), check=False).values
        h_new = mun * (1 + sh)
        inc = _rms(h_new - h)
        incs.append(inc)
        h = h_new
        if inc < tol:
            break
    else:
        res = _rms(h - mun * (1 + beurling_transform(GridField(mu.box, mu.h, h), check=False).values))
        raise ConvergenceError(f"no convergence in {max_iter} iterations", res)
    sh = beurling_transform(GridField(mu.box, mu.h, h), check=False).values
    residual = _rms(h - mun * (1 + sh)) / _rms(1 + sh)
    hf = GridField(mu.box, mu.h, h)
    F = mu.coords() + cauchy_transform(hf, check=False).values
    return BeltramiSolution(n, GridField(mu.box, mu.h, F), hf, residual, it, _contraction(incs),
                            float(np.abs(mun).max(initial=0)), n_flag, tol, incs)


def far_field_fit(sol: BeltramiSolution, ring: float = 0.1):
    """Least squares |F - z| = c/|z| + b on the outer ring of the box."""
    z = sol.F.coords()
    x0, x1, y0, y1 = sol.F.box
    half = (x1 - x0) / 2
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    d = np.maximum(np.abs(z.real - cx), np.abs(z.imag - cy))
    sel = d >= half * (1 - ring)
    A = np.column_stack([1 / np.abs(z[sel]), np.ones(sel.sum())])
    coef, *_ = np.linalg.lstsq(A, np.abs(sol.F.values[sel] - z[sel]), rcond=None)
    return float(coef[0]), float(coef[1])


def jacobian_positive_fraction(F: GridField) -> float:
    v = F.values
    fx = (np.roll(v, -1, 1) - np.roll(v, 1, 1)) / (2 * F.h)
    fy = (np.roll(v, -1, 0) - np.roll(v, 1, 0)) / (2 * F.h)
    det = (fx.real * fy.imag - fx.imag * fy.real)[1:-1, 1:-1]
    return float(np.mean(det > 0))


# ---------------------------------------------------------------------------
# strip solver

@dataclass
class StripGrid:
    nx: int
    ny: int
    Y: float = 2.0

    @property
    def dy(self):
        return 2 * self.Y / self.ny

    @property
    def x(self):
        return np.arange(self.nx) / self.nx

    @property
    def y(self):
        return -self.Y + (np.arange(self.ny) + 0.5) * self.dy

    @property
    def edges(self):
        return -self.Y + np.arange(self.ny + 1) * self.dy

    @property
    def k(self):
        return np.fft.fftfreq(self.nx, d=1.0 / self.nx)


def _phi(lam, d):
    """(1 - e^{-lam d}) / lam with the lam -> 0 limit d."""
    out = np.empty_like(lam, dtype=float)
    small = np.abs(lam * d) < 1e-8
    out[small] = d
    ls = lam[~small]
    out[~small] = -np.expm1(-ls * d) / ls
    return out


class StripOperator:
    """Cauchy and Beurling transforms for periodic densities on a strip grid."""

    def __init__(self, grid: StripGrid):
        self.grid = grid
        k = grid.k
        self.lam = 2 * np.pi * k
        d = grid.dy
        self.pos = k >= 0
        self.neg = k < 0
        lp, ln = self.lam[self.pos], -self.lam[self.neg]
        self.a_pos, self.b_pos = np.exp(-lp * d), _phi(lp, d)
        self.ah_pos, self.bh_pos = np.exp(-lp * d / 2), _phi(lp, d / 2)
        self.a_neg, self.b_neg = np.exp(-ln * d), _phi(ln, d)
        self.ah_neg, self.bh_neg = np.exp(-ln * d / 2), _phi(ln, d / 2)

    def modes(self, h):
        return np.fft.fft(h, axis=1) / self.grid.nx

    def cauchy_modes(self, hk):
        """Mode values g_k at cell centres and at cell edges."""
        ny = self.grid.ny
        gc = np.zeros_like(hk)
        ge = np.zeros((ny + 1, hk.shape[1]), dtype=complex)
        src = -2j * hk
        # k >= 0 from below, g = 0 under the support
        G = np.zeros(self.pos.sum(), dtype=complex)
        sp = src[:, self.pos]
        cpos = np.zeros((ny, self.pos.sum()), dtype=complex)
        epos = np.zeros((ny + 1, self.pos.sum()), dtype=complex)
        for j in range(ny):
            cpos[j] = self.ah_pos * G + self.bh_pos * sp[j]
            G = self.a_pos * G + self.b_pos * sp[j]
            epos[j + 1] = G
        # k < 0 from above, g = 0 over the support
        G = np.zeros(self.neg.sum(), dtype=complex)
        sn = src[:, self.neg]
        cneg = np.zeros((ny, self.neg.sum()), dtype=complex)
        eneg = np.zeros((ny + 1, self.neg.sum()), dtype=complex)
        for j in range(ny - 1, -1, -1):
            cneg[j] = self.ah_neg * G - self.bh_neg * sn[j]
            G = self.a_neg * G - self.b_neg * sn[j]
            eneg[j] = G
        gc[:, self.pos] = cpos
        gc[:, self.neg] = cneg
        ge[:, self.pos] = epos
        ge[:, self.neg] = eneg
        return gc, ge

    def apply(self, h):
        """Return (g, S h) on the grid for density h."""
        hk = self.modes(h)
        gc, _ = self.cauchy_modes(hk)
        shk = 1j * self.lam * gc - hk
        nx = self.grid.nx
        return np.fft.ifft(gc, axis=1) * nx, np.fft.ifft(shk, axis=1) * nx

    def beurling(self, h):
        return self.apply(h)[1]


@dataclass
class StripSolution:
    grid: StripGrid
    n: float | None
    h: np.ndarray
    Sh: np.ndarray
    edge_modes: np.ndarray
    residual_l2: float
    iterations: int
    contraction_estimate: float
    contraction_bound: float
    flagged: int
    tol: float
    increments: list

    @property
    def a_minus1(self):
        """Coefficient of z**-1 in g below the support, g = sum a_{-m} z**-m."""
        kk = self.grid.k
        j = np.nonzero(kk == -1)[0][0]
        return self.edge_modes[0, j] * np.exp(2 * np.pi * self.grid.Y)

    def g_at(self, x, y):
        """Exact evaluation of the discrete g at arbitrary points with |y| finite."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        grid = self.grid
        k = grid.k
        lam = 2 * np.pi * k
        edges = grid.edges
        hk = np.fft.fft(self.h, axis=1) / grid.nx
        ge = self.edge_modes
        ny = grid.ny
        j = np.clip(np.floor((y + grid.Y) / grid.dy).astype(int), -1, ny)
        out = np.zeros((x.size, k.size), dtype=complex)
        inside = (j >= 0) & (j < ny)
        pos = k >= 0
        neg = ~pos
        # inside the support: integrate from the cell edge on the stable side
        if inside.any():
            ji = j[inside]
            ti = y[inside] - edges[ji]
            src = -2j * hk[ji]
            lp = lam[pos]
            out_in = np.zeros((ji.size, k.size), dtype=complex)
            d = ti[:, None]
            out_in[:, pos] = np.exp(-lp * d) * ge[ji][:, pos] + _phi_arr(lp, d) * src[:, pos]
            ln = -lam[neg]
            d2 = (edges[ji + 1] - y[inside])[:, None]
            out_in[:, neg] = np.exp(-ln * d2) * ge[ji + 1][:, neg] - _phi_arr(ln, d2) * src[:, neg]
            out[inside] = out_in
        below = j < 0
        if below.any():
            d = (edges[0] - y[below])[:, None]
            out[np.ix_(below, neg)] = np.exp(lam[neg] * d) * ge[0][neg]
        above = j >= ny
        if above.any():
            d = (y[above] - edges[-1])[:, None]
            out[np.ix_(above, pos)] = np.exp(-lam[pos] * d) * ge[-1][pos]
        return np.sum(out * np.exp(2j * np.pi * np.outer(x, k)), axis=1)

    def L_at(self, x, y):
        return np.asarray(x) + 1j * np.asarray(y) + self.g_at(x, y).reshape(np.shape(x))

    def F_at_w(self, x, y):
        """Planar principal map F evaluated at z = exp(2 pi i (x + iy))."""
        Lw = self.L_at(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return np.exp(2j * np.pi * Lw) - 2j * np.pi * self.a_minus1

    def mu_on_grid(self):
        return self.h / (1 + self.Sh)


def _phi_arr(lam, d):
    lam = np.broadcast_to(lam, np.broadcast_shapes(np.shape(lam), np.shape(d)))
    d = np.broadcast_to(d, lam.shape)
    out = np.empty(lam.shape)
    small = np.abs(lam * d) < 1e-8
    out[small] = d[small]
    out[~small] = -np.expm1(-lam[~small] * d[~small]) / lam[~small]
    return out


def solve_strip(nu: np.ndarray, grid: StripGrid, n=None, tol: float = 1e-10, max_iter: int = 500,
                flagged: np.ndarray | None = None, op: StripOperator | None = None) -> StripSolution:
    """Fixed point h = nu_n (1 + S h) on the strip, L = w + C h."""
    nu = np.array(nu, dtype=complex)
    n_flag = 0
    if flagged is not None:
        nu[flagged] = 0
        n_flag = int(np.count_nonzero(flagged))
    if np.abs(nu).max(initial=0) > 1 + 1e-12:
        raise DomainError("|mu| must not exceed 1")
    nun = truncation_factor(n) * nu
    if np.abs(nun).max(initial=0) >= 1:
        raise DomainError("untruncated solve needs |mu| < 1")
    op = op or StripOperator(grid)
    h = nun.copy()
    incs = []
    it = 1
    for it in range(1, max_iter + 1):
        h_new = nun * (1 + op.beurling(h))
        inc = _rms(h_new - h)
        incs.append(inc)
        h = h_new
        if inc < tol:
            break
    else:
        res = _rms(h - nun * (1 + op.beurling(h)))
        raise ConvergenceError(f"no convergence in {max_iter} iterations", res)
    hk = op.modes(h)
    gc, ge = op.cauchy_modes(hk)
    Sh = np.fft.ifft(1j * op.lam * gc - hk, axis=1) * grid.nx
    residual = _rms(h - nun * (1 + Sh)) / _rms(1 + Sh)
    return StripSolution(grid, n, h, Sh, ge, residual, it, _contraction(incs),
                         float(np.abs(nun).max(initial=0)), n_flag, tol, incs)


# ---------------------------------------------------------------------------
# annulus estimates

class AnnulusError(DomainError):
    pass


def thickness(mask: np.ndarray, h: float) -> float:
    """Distance between the two complementary components of a lattice annulus."""
    comp, ncomp = ndimage.label(~mask)
    if ncomp != 2:
        raise AnnulusError(f"complement has {ncomp} components, expected 2")
    border = np.unique(np.concatenate([comp[0], comp[-1], comp[:, 0], comp[:, -1]]))
    border = border[border > 0]
    if border.size != 1:
        raise AnnulusError("mask does not separate an inner component from the boundary")
    outer = comp == border[0]
    inner = (comp > 0) & ~outer
    dist = ndimage.distance_transform_edt(~outer) * h
    # nodes at distance d from the other component are separated by a gap d - h
    return float(dist[inner].min() - h)


def modulus_lower_bound(mask: np.ndarray, K: np.ndarray, h: float) -> float:
    """Th(A)^2 / int_A K over a lattice annulus."""
    mask = np.asarray(mask, dtype=bool)
    th = max(thickness(mask, h), 0.0)
    total = float(np.sum(np.where(mask, K, 0.0)) * h * h)
    return th**2 / total if total > 0 else 0.0


def round_annulus_modulus(r: float, R: float, convention: str = "2pi log") -> float:
    """Modulus of {r < |z| < R}: 2 pi log(R/r), or log(R/r) / (2 pi) if asked."""
    v = np.log(R / r)
    return 2 * np.pi * v if convention == "2pi log" else v / (2 * np.pi)


@dataclass
class HalfAnnulusBounds:
    center: float
    R_prime: float
    r_prime: float

    @property
    def outer_box(self):
        return (self.center - self.R_prime, self.center + self.R_prime, 0.0, self.R_prime)

    @property
    def inner_box(self):
        return (self.center - self.r_prime, self.center + self.r_prime, 0.0, self.r_prime)


def image_halfannulus_bounds(homeo: HomeoExtension, x: float, r: float, R: float) -> HalfAnnulusBounds:
    """Boxes certified inside the image of D[x, R] minus D[x, r] under the extension."""
    if not 0 < r < R <= 1:
        raise DomainError("need 0 < r < R <= 1")
    g = homeo.psi
    k = np.arange(1, 9)
    steps = g(x - R + k * R / 4) - g(x - R + (k - 1) * R / 4)
    Rp = 0.5 * float(np.min(steps))
    rp = float(g(x + 2 * r) - g(x - 2 * r))
    return HalfAnnulusBounds(float(g(x)), Rp, rp)


def dyadic_index_set(m: int, r: float, R: float) -> np.ndarray:
    """S(m, r, R) = {l : r <= R 2^-m |l| <= R}."""
    lo = int(np.ceil(r * 2.0**m / R - 1e-12))
    hi = 2**m
    lo = max(lo, 0)
    pos = np.arange(max(lo, 1), hi + 1)
    parts = [-pos[::-1], pos]
    if lo == 0:
        parts.insert(1, np.zeros(1, dtype=int))
    return np.concatenate(parts)


def dirichlet_energy_bound(homeo: HomeoExtension, x: float, r: float, R: float,
                           max_terms: int = 2**21) -> float:
    """Dyadic upper bound for the distortion integral over the image half-annulus.

    Levels are summed exactly while the steps R 2^-m resolve the cells of psi;
    past that psi is linear on each interval, each level halves, and the
    remaining levels add up to the last computed level.
    """
    if not 0 < r < R < 1:
        raise DomainError("need 0 < r < R < 1")
    g = homeo.psi
    head = 2**5 * float(g(x + 2 * R) - g(x - 2 * R)) ** 2
    total = 0.0
    cell = 1.0 / homeo.M
    m = 0
    level = 0.0
    while True:
        ell = dyadic_index_set(m, r, R)
        d = R * 2.0**-m
        level = float(np.sum((g(x + (ell + 2) * d) - g(x + (ell - 2) * d)) ** 2))
        total += level
        if d * 64 <= cell or ell.size * 2 > max_terms:
            break
        if total > 0 and level < 1e-14 * total:
            level = 0.0
            break
        m += 1
    return head + 2**7 * (total + level)


def energy_integral(homeo: HomeoExtension, x: float, r: float, R: float, n: int = 400) -> float:
    """Midpoint lattice value of int_A |D Psi|^2 over D[x, R] minus D[x, r]."""
    hx = 2 * R / n
    xs = x - R + (np.arange(n) + 0.5) * hx
    ny = n // 2
    hy = R / ny
    ys = (np.arange(ny) + 0.5) * hy
    X, Y = np.meshgrid(xs, ys)
    keep = ~((np.abs(X - x) < r) & (Y < r))
    Ux, Uy, Vx, Vy = homeo.jacobian(X[keep], Y[keep])
    dz = 0.5 * np.abs((Ux + Vy) + 1j * (Vx - Uy))
    dzb = 0.5 * np.abs((Ux - Vy) + 1j * (Vx + Uy))
    return float(np.sum((dz + dzb) ** 2) * hx * hy)
