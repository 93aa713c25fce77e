"""Scale-matching oscillating walk and its stopping times.

Y_m = A(i_m) - B(j_m) + Y_N with A(N) = B(N) = 0, where A and B are random
walks in the scale index with Gaussian steps of mean -d and variance sigma^2.
In field-driven mode A and B are read off the V fields of two stacks,
in abstract mode they are drawn directly.  The branch logic is shared.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import ceil

import numpy as np

from .event_stats import wilson_ci
from .gmc_measures import build_measure
from .whitenoise_fields import DomainError, FieldStack, field, point_variance

BRANCH_STEPS = {"down": (1, 0), "up": (0, 1), "centre": (2, 2)}
_CODE = {0: "up", 1: "down", 2: "centre"}


@dataclass
class WalkParams:
    gamma: float
    rho: float
    N: int
    mode: str = "abstract"

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise DomainError("rho must lie in (0, 1)")
        if self.mode not in ("abstract", "field"):
            raise DomainError("mode is 'abstract' or 'field'")
        if self.N < 1:
            raise DomainError("N must be positive")

    @property
    def d(self):
        return (1 + self.gamma**2 / 2) * np.log(1 / self.rho)

    @property
    def sigma2(self):
        return self.gamma**2 * np.log(1 / self.rho)


@dataclass
class WalkTrace:
    Y: np.ndarray
    ij: np.ndarray
    branch: np.ndarray
    T: list
    ts: list
    uv: list
    seed: object
    N: int

    def rows(self):
        for m, (y, (i, j), b) in enumerate(zip(self.Y, self.ij, self.branch)):
            yield self.N + m, float(y), int(i), int(j), _CODE.get(int(b), "")


@dataclass
class WalkBatch:
    """All traces of one run: Y, i, j have shape (traces, steps + 1)."""

    params: WalkParams
    Y: np.ndarray
    i: np.ndarray
    j: np.ndarray
    branch: np.ndarray
    seed: object

    @property
    def n_traces(self):
        return self.Y.shape[0]

    def hits(self):
        return np.abs(self.Y) <= self.params.d

    def stopping_times(self, r: int) -> np.ndarray:
        """T_1 < T_2 < ... for trace r, as absolute indices m."""
        return self.params.N + np.nonzero(self.hits()[r])[0]

    def trace(self, r: int) -> WalkTrace:
        T = self.stopping_times(r)
        ts, uv = [], []
        for m in T:
            k = m - self.params.N
            u, v = select_pair(self.Y[r, k], 0, 0, self.params.d)
            uv.append((u, v))
            ts.append((self.i[r, k] + u, self.j[r, k] + v))
        ij = np.stack([self.i[r], self.j[r]], axis=1)
        return WalkTrace(self.Y[r], ij, self.branch[r], [self.params.N - 1] + T.tolist(), ts, uv,
                         self.seed, self.params.N)

    def increments(self):
        """(branch code, increment) over all steps of all traces."""
        return self.branch[:, :-1].ravel(), np.diff(self.Y, axis=1).ravel()


def select_pair(Y: float, i, j, d: float):
    """Minimal (u, v) in [1, 3/2] u {2}, u first, with Y + d (v - u) = 0; returns (i + u, j + v)."""
    if abs(Y) > d * (1 + 1e-12):
        raise DomainError("|Y| must not exceed d")
    r = min(max(Y / d, -1.0), 1.0)  # u - v = r
    if r <= 0:
        # v = u - r >= u; smallest u with u and u - r both allowed
        if 1 - r <= 1.5:
            u, v = 1.0, 1.0 - r
        else:
            u, v = 2.0 + r, 2.0
    else:
        if 1 + r <= 1.5:
            u, v = 1.0 + r, 1.0
        else:
            u, v = 2.0, 2.0 - r
    return i + u, j + v


def _branch_codes(Y, d):
    # 0: Y < -d (j + 1), 1: Y > d (i + 1), 2: otherwise (both + 2)
    return np.where(Y < -d, 0, np.where(Y > d, 1, 2))


def _walk(A, B, Y0, d, steps):
    """Shared branch logic.  A, B: (R, K) paths with A[:, 0] = B[:, 0] = 0."""
    R = Y0.shape[0]
    Y = np.empty((R, steps + 1))
    I = np.zeros((R, steps + 1), dtype=np.int64)
    J = np.zeros((R, steps + 1), dtype=np.int64)
    br = np.full((R, steps + 1), -1, dtype=np.int8)
    rows = np.arange(R)
    Y[:, 0] = Y0
    for m in range(steps):
        b = _branch_codes(Y[:, m], d)
        br[:, m] = b
        di = np.where(b == 1, 1, np.where(b == 2, 2, 0))
        dj = np.where(b == 0, 1, np.where(b == 2, 2, 0))
        I[:, m + 1] = I[:, m] + di
        J[:, m + 1] = J[:, m] + dj
        Y[:, m + 1] = Y0 + A[rows, I[:, m + 1]] - B[rows, J[:, m + 1]]
    return Y, I, J, br


def abstract_paths(params: WalkParams, n_traces: int, K: int, rng):
    steps = rng.normal(-params.d, np.sqrt(params.sigma2), size=(2, n_traces, K))
    zero = np.zeros((2, n_traces, 1))
    paths = np.concatenate([zero, np.cumsum(steps, axis=-1)], axis=-1)
    return paths[0], paths[1]


def field_paths(params: WalkParams, stacks, x: int = 0, y: int = 0):
    """A(k) = X-contribution of scale N + k from the V fields of the two stacks."""
    s1, s2 = stacks
    L = np.log(1 / params.rho)
    g = params.gamma
    N = params.N
    ks = np.arange(N, s1.depth + 1)
    A = np.stack([g * field(s1, k, "V")[..., x] for k in ks], axis=-1)
    B = np.stack([g * field(s2, k, "V")[..., y] for k in ks], axis=-1)
    drift = (g**2 / 2 + 1) * (ks - N) * L
    A = A - A[..., :1] - drift
    B = B - B[..., :1] - drift
    return np.atleast_2d(A), np.atleast_2d(B)


def field_initial(params: WalkParams, stacks, x: int = 0, y: int = 0):
    """Y_N = X^H_{N,N} + log(tau2([0,1] minus y + B_N) / tau1([0,1] minus x + B_N))."""
    from .event_stats import IntervalFamily, OffsetMass, x_processes
    if 2 * params.rho**params.N >= 1:
        raise DomainError("x + B_N covers the circle; the mass ratio needs 2 rho^N < 1")
    s1, s2 = stacks
    xh, _ = x_processes(stacks, x, y, params.N, params.N, params.gamma, params.rho)
    m1 = build_measure(s1, params.gamma).masses
    m2 = build_measure(s2, params.gamma).masses
    fam = IntervalFamily(params.rho)
    m1, m2 = np.atleast_2d(m1), np.atleast_2d(m2)
    out = np.empty(m1.shape[0])
    for r in range(m1.shape[0]):
        a, b = OffsetMass(m1[r], x), OffsetMass(m2[r], y)
        out[r] = np.log((b.total - b.mass(*fam.B(params.N))) / (a.total - a.mass(*fam.B(params.N))))
    return np.atleast_1d(xh) + out


def default_initial(params: WalkParams, n_traces: int, rng):
    """Gaussian with the variance of X^H_{N,N}; the total-mass log ratio is left out."""
    var = 2 * params.gamma**2 * point_variance("H", params.rho, params.N)
    return rng.normal(0.0, np.sqrt(var), n_traces)


def run_walk(params: WalkParams, init=None, steps: int = 100, n_traces: int = 1, seed: int = 0,
             stacks=None, x: int = 0, y: int = 0) -> WalkBatch:
    """Run the walk for `steps` moves from m = N.

    init: None (default law), a number, an array of start values, or a
    callable (rng, n) -> array.  In field mode with init None the start
    value is computed from the stacks.
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    K = 2 * steps + 1
    if params.mode == "abstract":
        A, B = abstract_paths(params, n_traces, K, rng)
    else:
        if stacks is None:
            raise DomainError("field mode needs two field stacks")
        if stacks[0].depth < params.N + K - 1:
            raise DomainError(f"field stacks need depth >= {params.N + K - 1}")
        A, B = field_paths(params, stacks, x, y)
        n_traces = A.shape[0]
    if init is None:
        Y0 = field_initial(params, stacks, x, y) if params.mode == "field" else default_initial(params, n_traces, rng)
    elif callable(init):
        Y0 = np.asarray(init(rng, n_traces), dtype=float)
    else:
        Y0 = np.broadcast_to(np.asarray(init, dtype=float), (n_traces,)).copy()
    Y, I, J, br = _walk(A, B, Y0, params.d, steps)
    return WalkBatch(params, Y, params.N + I, params.N + J, br, seed)


# ---------------------------------------------------------------------------
# statistics

def branch_moments(batch: WalkBatch):
    """Sample mean and variance of increments per branch with their standard errors."""
    codes, inc = batch.increments()
    out = {}
    for code, name in _CODE.items():
        x = inc[codes == code]
        n = x.size
        if n < 2:
            out[name] = {"n": int(n)}
            continue
        mean, var = float(x.mean()), float(x.var(ddof=1))
        m4 = float(np.mean((x - x.mean()) ** 4))
        out[name] = {"n": int(n), "mean": mean, "mean_se": float(np.sqrt(var / n)), "var": var,
                     "var_se": float(np.sqrt(max(m4 - var**2, 0.0) / n))}
    return out


def expected_moments(params: WalkParams):
    d, s2 = params.d, params.sigma2
    return {"down": (-d, s2), "up": (d, s2), "centre": (0.0, 4 * s2)}


def occupation_stats(batch: WalkBatch, window=None, delta_prime: float = 0.05):
    """Fraction of m in [N, 3N] with |Y_m| <= d and P(T_ceil(delta' N) <= 3N)."""
    if batch.n_traces < 100:
        raise DomainError("need at least 100 traces")
    N = batch.params.N
    lo, hi = window or (N, 3 * N)
    k0, k1 = lo - N, min(hi - N, batch.Y.shape[1] - 1)
    hits = batch.hits()
    frac = hits[:, k0 : k1 + 1].mean(axis=1)
    n_stop = ceil(delta_prime * N)
    count = hits[:, : hi - N + 1].sum(axis=1)
    ok = int(np.sum(count >= n_stop))
    return {"occupation_mean": float(frac.mean()), "occupation_se": float(frac.std(ddof=1) / np.sqrt(frac.size)),
            "n_stop": n_stop, "p_stop": ok / batch.n_traces, "p_stop_ci": wilson_ci(ok, batch.n_traces),
            "window": (lo, hi)}


def overshoot_samples(batch: WalkBatch):
    """Y_S for S the first m >= N with Y_m <= d, over traces with Y_N > d."""
    d = batch.params.d
    start = batch.Y[:, 0] > d
    Y = batch.Y[start]
    below = Y <= d
    has = below.any(axis=1)
    first = np.argmax(below, axis=1)
    return Y[has, first[has]], int(start.sum())


def overshoot_tail(batch: WalkBatch, a):
    """Empirical P(Y_S < a | Y_N > d) with a Wilson interval."""
    d = batch.params.d
    if np.any(np.asarray(a) > -d):
        raise DomainError("threshold must be <= -d")
    ys, n = overshoot_samples(batch)
    if ys.size < 100:
        raise DomainError("too few conditioning events")
    out = []
    for av in np.atleast_1d(a):
        k = int(np.sum(ys < av))
        out.append({"a": float(av), "rate": k / ys.size, "ci": wilson_ci(k, ys.size), "n": int(ys.size)})
    return out


def fit_envelope(batch: WalkBatch, fit_a, test_a):
    """C = max rate / exp(-a^2 / 2 sigma^2) on fit_a; compare held-out test_a against C exp(...)."""
    s2 = batch.params.sigma2
    env = lambda a: np.exp(-(a**2) / (2 * s2))
    fit = overshoot_tail(batch, fit_a)
    C = max(r["rate"] / env(r["a"]) for r in fit)
    test = overshoot_tail(batch, test_a)
    rows = [{**r, "bound": float(C * env(r["a"]))} for r in test]
    return float(C), rows, all(r["rate"] <= r["bound"] for r in rows)


def burn_in_tail(params: WalkParams, u: float, j_max: int, n_traces: int = 10000, seed: int = 0):
    """P(T_1 - N > j | Y_N = u) for j = 0..j_max.

    The log-linear slope is fitted where the tail has dropped below 1/2;
    j0 = 8|u|/d is the offset in the geometric bound.
    """
    batch = run_walk(params, init=u, steps=j_max + 1, n_traces=n_traces, seed=seed)
    hits = batch.hits()
    first = np.where(hits.any(axis=1), np.argmax(hits, axis=1), np.iinfo(np.int64).max)
    js = np.arange(j_max + 1)
    tail = np.array([np.mean(first > j) for j in js])
    j0 = int(np.ceil(8 * abs(u) / params.d))
    sel = (tail > 0) & (tail < 0.5)
    slope = float(np.polyfit(js[sel], np.log(tail[sel]), 1)[0]) if sel.sum() >= 3 else float("nan")
    return {"j": js.tolist(), "tail": tail.tolist(), "j0": j0, "log_slope": slope}


def write_trace_csv(path, trace: WalkTrace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "Y", "i", "j", "branch"])
        for row in trace.rows():
            w.writerow([row[0], repr(row[1]), row[2], row[3], row[4]])


def selection_invariants(trace: WalkTrace, d: float) -> dict:
    """Spacing >= 1/4, fractional parts in [0, 1/2] and exact roots for every selection."""
    spacing = all(t2 - t1 >= 0.25 and s2 - s1 >= 0.25 for (t1, s1), (t2, s2) in zip(trace.ts, trace.ts[1:]))
    frac = all(0 <= t - np.floor(t) <= 0.5 and 0 <= s - np.floor(s) <= 0.5 for t, s in trace.ts)
    roots = []
    for m, (u, v) in zip(trace.T[1:], trace.uv):
        roots.append(abs(trace.Y[m - trace.N] + d * (v - u)))
    root = max(roots, default=0.0) <= 1e-12 * max(1.0, d)
    steps = np.diff(trace.ij, axis=0)
    allowed = {(0, 1), (1, 0), (2, 2)}
    moves = all(tuple(s) in allowed for s in steps.tolist())
    consistent = True
    for m in range(len(steps)):
        y = trace.Y[m]
        expect = (0, 1) if y < -d else (1, 0) if y > d else (2, 2)
        consistent &= tuple(steps[m].tolist()) == expect
    return {"spacing": spacing, "fractional": frac, "root": root, "moves": moves, "branch_consistent": consistent}
