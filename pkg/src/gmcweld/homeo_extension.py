"""Circle homeomorphisms from measures and their quasiconformal extensions.

``psi`` is the normalized distribution function of a measure, continued by
psi(x + n) = psi(x) + n.  It is piecewise linear with knots at i/M, so all the
averages used by the Beurling-Ahlfors extension are exact piecewise quadratic
antiderivatives.

Extension of psi to the upper half-plane:

* 0 < y <= 1: sliding averages of psi over [x - y, x + y]
* 1 < y < 2: x + iy + (2 - y) c0 with c0 = int_0^1 psi - 1/2
* y >= 2: identity

The lower half-plane map is the conjugate of the extension of its own psi.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .gmc_measures import MeasureSample, inverse_cdf
from .whitenoise_fields import DomainError


class SingularDistortionError(ValueError):
    pass


@dataclass
class HomeoExtension:
    masses: np.ndarray
    orientation: str = "upper"

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.ndim != 1 or np.any(m < 0) or not m.sum() > 0:
            raise DomainError("need one measure with nonnegative masses and positive total")
        if np.any(m == 0):
            raise DomainError("psi must be strictly increasing; measure has empty cells")
        if self.orientation not in ("upper", "lower"):
            raise DomainError("orientation is 'upper' or 'lower'")
        self.masses = m
        self.M = m.size
        w = m / m.sum()
        self.knots = np.concatenate([[0.0], np.cumsum(w)])
        self.knots[-1] = 1.0
        self.slopes = w * self.M
        h = 1.0 / self.M
        # integral of psi over each cell, then prefix sums
        cell_int = h * (self.knots[:-1] + self.knots[1:]) / 2
        self.prefix = np.concatenate([[0.0], np.cumsum(cell_int)])
        self.I1 = self.prefix[-1]
        self.c0 = self.I1 - 0.5

    # -- boundary map ---------------------------------------------------

    def _split(self, x):
        x = np.asarray(x, dtype=float)
        n = np.floor(x)
        r = x - n
        i = np.minimum((r * self.M).astype(np.int64), self.M - 1)
        return n, r, i, r - i / self.M

    def psi(self, x):
        n, _, i, u = self._split(x)
        return n + self.knots[i] + self.slopes[i] * u

    def psi_inv(self, q):
        return inverse_cdf(self.masses, q)

    def P(self, x):
        """Antiderivative int_0^x psi, valid on the whole line."""
        n, r, i, u = self._split(x)
        base = self.prefix[i] + self.knots[i] * u + self.slopes[i] * u * u / 2
        return n * self.I1 + n * (n - 1) / 2 + n * r + base

    def integral(self, a, b):
        """int_a^b psi, computed locally when both ends share a cell."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        same = np.floor(a * self.M) == np.floor(b * self.M)
        local = (b - a) * (self.psi(a) + self.psi(b)) / 2
        return np.where(same, local, self.P(b) - self.P(a))

    # -- extension to the upper half-plane (own orientation ignored) ----

    def _ext_upper(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x, y = np.broadcast_arrays(x, y)
        out = np.empty(x.shape, dtype=complex)
        zero = y <= 0
        low = (y > 0) & (y <= 1)
        mid = (y > 1) & (y < 2)
        high = y >= 2
        if zero.any():
            out[zero] = self.psi(x[zero])
        if low.any():
            xs, ys = x[low], y[low]
            right = self.integral(xs, xs + ys)
            left = self.integral(xs - ys, xs)
            out[low] = (right + left) / (2 * ys) + 1j * (right - left) / ys
        if mid.any():
            out[mid] = x[mid] + (2 - y[mid]) * self.c0 + 1j * y[mid]
        if high.any():
            out[high] = x[high] + 1j * y[high]
        return out

    def _jac_upper(self, x, y):
        """Real Jacobian entries (Ux, Uy, Vx, Vy) of the upper extension, y > 0."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x, y = np.broadcast_arrays(x, y)
        Ux = np.ones(x.shape)
        Uy = np.zeros(x.shape)
        Vx = np.zeros(x.shape)
        Vy = np.ones(x.shape)
        low = (y > 0) & (y <= 1)
        mid = (y > 1) & (y < 2)
        if low.any():
            xs, ys = x[low], y[low]
            pp, p0, pm = self.psi(xs + ys), self.psi(xs), self.psi(xs - ys)
            right = self.integral(xs, xs + ys)
            left = self.integral(xs - ys, xs)
            U = (right + left) / (2 * ys)
            V = (right - left) / ys
            Ux[low] = (pp - pm) / (2 * ys)
            Uy[low] = (pp + pm) / (2 * ys) - U / ys
            Vx[low] = (pp - 2 * p0 + pm) / ys
            Vy[low] = (pp - pm) / ys - V / ys
        Uy[mid] = -self.c0
        return Ux, Uy, Vx, Vy

    # -- oriented map ---------------------------------------------------

    def ext(self, x, y):
        """Extension evaluated at x + iy in its own half-plane."""
        y = np.asarray(y, dtype=float)
        if self.orientation == "upper":
            if np.any(y < 0):
                raise DomainError("upper extension needs y >= 0")
            return self._ext_upper(x, y)
        if np.any(y > 0):
            raise DomainError("lower extension needs y <= 0")
        return np.conj(self._ext_upper(x, -y))

    def jacobian(self, x, y):
        y = np.asarray(y, dtype=float)
        if self.orientation == "upper":
            return self._jac_upper(x, y)
        Ux, Uy, Vx, Vy = self._jac_upper(x, -y)
        return Ux, -Uy, -Vx, Vy

    def ext_inverse(self, zeta, tol=1e-13, max_iter=60):
        """Preimage of points of the own half-plane under the extension."""
        zeta = np.asarray(zeta, dtype=complex)
        if self.orientation == "lower":
            return np.conj(self._inverse_upper(np.conj(zeta), tol, max_iter))
        return self._inverse_upper(zeta, tol, max_iter)

    def _inverse_upper(self, zeta, tol, max_iter):
        a = zeta.real.astype(float).ravel()
        b = zeta.imag.astype(float).ravel()
        if np.any(b < 0):
            raise DomainError("point outside the half-plane")
        out = np.empty(a.shape, dtype=complex)
        hi = b >= 2
        out[hi] = a[hi] + 1j * b[hi]
        mid = (b >= 1) & (b < 2)
        out[mid] = a[mid] - (2 - b[mid]) * self.c0 + 1j * b[mid]
        zero = b == 0
        out[zero] = self.psi_inv(a[zero])
        low = (b > 0) & (b < 1)
        if low.any():
            out[low] = self._newton(a[low], b[low], tol, max_iter)
        return out.reshape(zeta.shape)

    def _newton(self, a, b, tol, max_iter):
        x = self.psi_inv(a)
        # start height from a bisection on Im along the vertical through x
        ylo = np.zeros_like(b)
        yhi = np.ones_like(b)
        for _ in range(40):
            ym = (ylo + yhi) / 2
            v = self._ext_upper(x, ym).imag
            below = v < b
            ylo = np.where(below, ym, ylo)
            yhi = np.where(below, yhi, ym)
        y = (ylo + yhi) / 2
        target = a + 1j * b
        for _ in range(max_iter):
            f = self._ext_upper(x, y) - target
            err = np.abs(f)
            if err.max() < tol:
                break
            Ux, Uy, Vx, Vy = self._jac_upper(x, y)
            det = Ux * Vy - Uy * Vx
            dx = (Vy * f.real - Uy * f.imag) / det
            dy = (-Vx * f.real + Ux * f.imag) / det
            step = np.ones_like(x)
            for _ in range(30):
                yn = y - step * dy
                ok = (yn > 0) & (yn <= 1)
                fn = np.where(ok, np.abs(self._ext_upper(x - step * dx, np.clip(yn, 1e-300, 1)) - target), np.inf)
                good = fn < err
                if good.all():
                    break
                step = np.where(good, step, step / 2)
            x = x - step * dx
            y = np.clip(y - step * dy, 1e-300, 1.0)
        return x + 1j * y

    def wirtinger(self, x, y):
        return wirtinger_from_jacobian(*self.jacobian(x, y))

    def inverse_dilatation(self, zeta):
        """mu of the inverse map at image points zeta, plus a flag for bad nodes."""
        w = self.ext_inverse(zeta)
        Ux, Uy, Vx, Vy = self.jacobian(w.real, w.imag)
        det = Ux * Vy - Uy * Vx
        flagged = ~(det > 0)
        safe = np.where(flagged, 1.0, det)
        inv = (Vy / safe, -Uy / safe, -Vx / safe, Ux / safe)
        dz, dzb = wirtinger_from_jacobian(*inv)
        mu = np.where(flagged, 0.0, dzb / dz)
        return mu, flagged


def wirtinger_from_jacobian(Ux, Uy, Vx, Vy):
    """(d/dz, d/dzbar) of u + iv from its real partial derivatives."""
    dz = 0.5 * ((Ux + Vy) + 1j * (Vx - Uy))
    dzb = 0.5 * ((Ux - Vy) + 1j * (Vx + Uy))
    return dz, dzb


def build_homeomorphism(measure, orientation: str = "upper") -> HomeoExtension:
    masses = measure.masses if isinstance(measure, MeasureSample) else measure
    return HomeoExtension(np.asarray(masses, dtype=float), orientation)


def ba_extension_at(homeo: HomeoExtension, x, y):
    return homeo.ext(x, y)


def ba_derivative_at(homeo: HomeoExtension, x, y):
    """Wirtinger pair of the extension inside the averaging band 0 < |y| < 1."""
    ay = np.abs(np.asarray(y, dtype=float))
    if np.any((ay <= 0) | (ay >= 1)):
        raise DomainError("derivative formulas need 0 < |y| < 1")
    return homeo.wirtinger(x, y)


def derivative_bound(homeo: HomeoExtension, x, y):
    """4 |psi(x + y) - psi(x - y)| / y, an upper bound for the Jacobian norm."""
    ay = np.abs(np.asarray(y, dtype=float))
    return 4 * np.abs(homeo.psi(x + ay) - homeo.psi(x - ay)) / ay


def distortion_at(mu):
    a = np.abs(np.asarray(mu))
    if np.any(a >= 1):
        raise SingularDistortionError("|mu| >= 1")
    out = (1 + a) / (1 - a)
    return out if out.ndim else float(out)


def strip_dilatation(h1: HomeoExtension, h2: HomeoExtension, x, y):
    """Dilatation of the inverse maps in log coordinates w = log z / (2 pi i).

    Upper half uses h1, lower half h2; zero for |y| >= 2.  Returns (nu, flagged).
    """
    X, Y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    nu = np.zeros(X.shape, dtype=complex)
    flagged = np.zeros(X.shape, dtype=bool)
    for sel, h in (((Y > 0) & (Y < 2), h1), ((Y < 0) & (Y > -2), h2)):
        if sel.any():
            m, f = h.inverse_dilatation(X[sel] + 1j * Y[sel])
            nu[sel] = m
            flagged[sel] = f
    return nu, flagged


@dataclass
class GridField:
    """Complex values on a square lattice with spacing h over box (x0, x1, y0, y1)."""

    box: tuple
    h: float
    values: np.ndarray
    mask: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    # magic, box (4 doubles), h, ny, nx, has_mask; all little-endian
    _HEADER = struct.Struct("<8s5d3q")
    MAGIC = b"GMCWGF01"

    def to_bytes(self) -> bytes:
        """Header, row-major (re, im) float64 pairs, then an optional uint8 mask."""
        ny, nx = self.values.shape
        has_mask = self.mask is not None
        head = self._HEADER.pack(self.MAGIC, *map(float, self.box), float(self.h), ny, nx, int(has_mask))
        body = np.ascontiguousarray(self.values, dtype="<c16").tobytes()
        tail = np.ascontiguousarray(self.mask, dtype=np.uint8).tobytes() if has_mask else b""
        return head + body + tail

    @classmethod
    def from_bytes(cls, data: bytes) -> "GridField":
        n = cls._HEADER.size
        magic, x0, x1, y0, y1, h, ny, nx, has_mask = cls._HEADER.unpack(data[:n])
        if magic != cls.MAGIC:
            raise DomainError("not a GridField byte stream")
        size = ny * nx * 16
        vals = np.frombuffer(data[n : n + size], dtype="<c16").reshape(ny, nx).astype(complex)
        mask = None
        if has_mask:
            mask = np.frombuffer(data[n + size : n + size + ny * nx], dtype=np.uint8).reshape(ny, nx).astype(bool)
        return cls((x0, x1, y0, y1), h, vals, mask)

    def coords(self):
        x0, _, y0, _ = self.box
        ny, nx = self.values.shape
        xs = x0 + self.h * np.arange(nx)
        ys = y0 + self.h * np.arange(ny)
        X, Y = np.meshgrid(xs, ys)
        return X + 1j * Y


def lattice(box, n: int) -> GridField:
    """Empty n x n lattice over a square box (x0, x1, y0, y1), right edge excluded."""
    x0, x1, y0, y1 = box
    h = (x1 - x0) / n
    if abs((y1 - y0) / n - h) > 1e-12 * max(1.0, abs(h)):
        raise DomainError("box must be square")
    return GridField(tuple(box), h, np.zeros((n, n), dtype=complex))


def dilatation_field(h1: HomeoExtension, h2: HomeoExtension, box=(-1.5, 1.5, -1.5, 1.5), n: int = 256):
    """Planar dilatation: inverse of Phi_1 inside the disk, of Phi_2 outside.

    Returns (GridField of mu, number of flagged nodes).
    """
    g = lattice(box, n)
    z = g.coords()
    r = np.abs(z)
    with np.errstate(divide="ignore"):
        wy = -np.log(r) / (2 * np.pi)
    wx = np.angle(z) / (2 * np.pi)
    inside = (r > 0) & (np.abs(wy) < 2)
    mu = np.zeros(z.shape, dtype=complex)
    flagged = np.zeros(z.shape, dtype=bool)
    nu, fl = strip_dilatation(h1, h2, wx[inside], wy[inside])
    zz = z[inside]
    mu[inside] = -(zz / np.conj(zz)) * nu
    flagged[inside] = fl
    g.values = mu
    g.mask = inside & (mu != 0)
    return g, int(flagged.sum())


def psi_holder_fit(homeo: HomeoExtension, deltas):
    """Fit sup_x |psi(x + delta) - psi(x)| ~ C delta^c over grid points x."""
    x = np.arange(homeo.M) / homeo.M
    sups = np.array([np.max(homeo.psi(x + d) - homeo.psi(x)) for d in deltas])
    c, logC = np.polyfit(np.log(deltas), np.log(sups), 1)
    return float(np.exp(logC)), float(c), sups
