"""Acceptance criteria at full size.

Each test carries a ``criterion`` mark; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run.  Run alone with

    pytest tests/test_acceptance.py -v
"""

import time

import numpy as np
import pytest
from scipy import stats

from gmcweld.beltrami_solver import solve_beltrami
from gmcweld.event_stats import (
    EventSpec,
    World,
    event_frequency,
    indicator_correlation,
    lebesgue_shape,
    shape_red_event,
)
from gmcweld.gmc_measures import build_measure, build_restricted_measure, moment_slope, zeta_p
from gmcweld.homeo_extension import lattice
from gmcweld.oscillating_walk import (
    WalkParams,
    branch_moments,
    expected_moments,
    fit_envelope,
    occupation_stats,
    run_walk,
    selection_invariants,
)
from gmcweld.welding_pipeline import WeldingConfig, refinement_study, run_welding
from gmcweld.whitenoise_fields import covariance_check, log_kernel, sample_field_stack, slab_overlap_quad


@pytest.fixture(scope="module")
def covariance_run():
    t0 = time.perf_counter()
    res = covariance_check(4096, 0.5, 10, seed=0, replicas=20_000, batch=250)
    return res, time.perf_counter() - t0


@pytest.mark.criterion(1, "H-field covariance law")
def test_covariance_law(covariance_run, request):
    res, elapsed = covariance_run
    assert res["H_pass_fraction"] >= 0.95
    assert elapsed <= 600
    # the oracle approaches the log kernel as the cutoff goes to zero; for t >= 0.05 the
    # slabs below height 2^-6 no longer reach both points, so the gap there is quadrature noise
    ts = np.linspace(0.05, 0.5, 10)
    errs = [max(abs(slab_overlap_quad("H", 0.5**depth, np.inf, t) - log_kernel(t)) for t in ts)
            for depth in (1, 2, 4, 10, 40)]
    assert np.all(np.diff(errs) <= 1e-9) and errs[0] > 1e-2 and errs[-1] < 1e-3
    request.node.summary = (f"{res['H_pass_fraction']:.0%} of {len(res['H'])} offsets within 3 SE, "
                            f"oracle gap {errs[-1]:.1e} at 2^-40, {elapsed:.0f} s")


@pytest.fixture(scope="module")
def gmc_ensemble():
    return sample_field_stack(256, 0.25, 4, seed=21, replicas=10_000, substeps=4, with_v=False)


@pytest.mark.criterion(2, "GMC normalization and martingale refinement")
def test_gmc_normalization(gmc_ensemble, request):
    tot = build_measure(gmc_ensemble, 0.3).total
    se = tot.std(ddof=1) / np.sqrt(tot.size)
    assert abs(tot.mean() - 1) < 3 * se
    coarse = build_measure(gmc_ensemble, 0.3, depth_cutoff=2).total
    diff = tot - coarse
    se_d = diff.std(ddof=1) / np.sqrt(diff.size)
    assert abs(diff.mean()) < 3 * se_d
    request.node.summary = f"mean mass {tot.mean():.4f} +- {se:.4f}, refinement gap {diff.mean():.1e} +- {se_d:.1e}"


@pytest.mark.criterion(3, "multifractal moment slopes")
def test_multifractal_slope(request):
    masses = np.concatenate([
        build_measure(sample_field_stack(4096, 0.5, 10, seed=3, replicas=500, first_replica=500 * b,
                                         with_v=False), 0.3).masses
        for b in range(4)])
    deltas = [2.0**-k for k in range(2, 8)]
    s2 = moment_slope(masses, 2, deltas, gamma=0.3)
    s1 = moment_slope(masses, 1, deltas, gamma=0.3)
    assert zeta_p(2, 0.3) == pytest.approx(1.91)
    assert abs(s2.slope - zeta_p(2, 0.3)) <= 0.1
    assert abs(s1.slope - 1) <= 0.02
    request.node.summary = f"p=2 slope {s2.slope:.3f} vs 1.91, p=1 slope {s1.slope:.4f}"


def _rescaled_nu(t, seed, replicas=1000, M=2**14, rho=0.25, layers=3, gamma=0.3):
    # cutoff sits `layers` scales below rho**t, so both samples resolve the same relative window
    out = []
    for b in range(0, replicas, 100):
        s = sample_field_stack(M, rho, t + layers, seed, replicas=100, first_replica=b)
        nu = build_restricted_measure(s, gamma, t, "nu_t")
        k = int(round(rho**t * M))
        out.append(nu.masses[:, :k].sum(axis=1) / rho**t)
    return np.concatenate(out)


@pytest.mark.criterion(4, "scale invariance of nu_t")
def test_nu_scaling(request):
    a, b = _rescaled_nu(2, seed=10), _rescaled_nu(3, seed=20)
    ks = stats.ks_2samp(a, b)
    assert ks.pvalue > 0.05
    request.node.summary = f"KS statistic {ks.statistic:.3f}, p = {ks.pvalue:.2f}"


@pytest.mark.criterion(5, "Beltrami solver exactness")
def test_beltrami_exactness(request):
    g = lattice((-4, 4, -4, 4), 512)
    z = g.coords()
    t0 = time.perf_counter()
    g.values = 0.3 * (np.abs(z) < 1).astype(complex)
    sol = solve_beltrami(g, None, tol=1e-10)
    elapsed = time.perf_counter() - t0
    with np.errstate(divide="ignore", invalid="ignore"):
        ref = np.where(np.abs(z) < 1, z + 0.3 * np.conj(z), z + 0.3 / z)
    err = np.max(np.abs(sol.F.values - ref))
    assert err < 5e-3 and elapsed <= 60
    zero = solve_beltrami(lattice((-2, 2, -2, 2), 128), None)
    assert np.max(np.abs(zero.F.values - zero.F.coords())) <= 1e-12
    residuals = [sol.residual_l2, zero.residual_l2]
    ratios = []
    disk = lattice((-4, 4, -4, 4), 128)
    disk.values = (np.abs(disk.coords()) < 1).astype(complex)
    for n in (1, 4, 9):
        s = solve_beltrami(disk, n, tol=1e-12, max_iter=2000)
        residuals.append(s.residual_l2)
        ratios.append(s.contraction_estimate / (n / (n + 1)))
        assert s.residual_l2 < s.tol
    assert sol.residual_l2 < sol.tol and zero.residual_l2 < zero.tol
    assert all(abs(r - 1) <= 0.1 for r in ratios)
    request.node.summary = (f"max error {err:.1e} in {elapsed:.1f} s, max residual {max(residuals):.1e}, "
                            f"contraction ratios {', '.join(f'{r:.3f}' for r in ratios)}")


@pytest.mark.criterion(6, "end-to-end welding")
def test_welding(request):
    flat = run_welding(WeldingConfig(gamma=0.0, M=64, depth=3, nx=64), 0)
    radial = np.max(np.abs(np.abs(flat.curve) - 1))
    assert radial < 1e-6 and flat.consistency_error < 1e-6
    e1, e2 = refinement_study(WeldingConfig(gamma=0.2, M=64, depth=3), 0, (128, 256))
    assert e1 / e2 >= 1.5
    cfg = WeldingConfig(gamma=0.2, M=64, depth=3, nx=128)
    rough = run_welding(cfg, 0)
    assert rough.stoilow_median < 5 * cfg.tol
    request.node.summary = (f"gamma=0: radial {radial:.1e}, consistency {flat.consistency_error:.1e}; "
                            f"gamma=0.2: refinement factor {e1 / e2:.2f}, Stoilow median {rough.stoilow_median:.1e}")


def _worlds(R, gamma, M, rho, depth, seed=0, substeps=4):
    for r in range(R):
        st_ = tuple(sample_field_stack(M, rho, depth, seed, substeps=substeps, first_replica=2 * r + j)
                    for j in (0, 1))
        yield World(tuple(build_measure(s, gamma) for s in st_), st_, gamma, rho)


@pytest.mark.criterion(7, "event machinery")
def test_events(request):
    assert lebesgue_shape(140, 1)
    assert not lebesgue_shape(2, 1)
    table = event_frequency([EventSpec("Frac", {"n": 1}), EventSpec("Upp", {"n": 1})],
                            _worlds(100, 0.0, 64, 1 / 16, 5))
    assert [row["rate"] for row in table] == [1.0, 1.0]
    # the default ShapeRed constants cannot be met at a desk-scale rho, so inner and J are relaxed
    consts = {"ShapeRed": {"inner": 2.0, "J": 2.0**-5, "mass_hi": 1.75}}
    R = 1000
    a, b = np.zeros(R, bool), np.zeros(R, bool)
    for r in range(R):
        s = sample_field_stack(4096, 1 / 16, 3, 7, substeps=4, first_replica=r)
        a[r] = shape_red_event(build_restricted_measure(s, 0.3, 1, "tau_t"), 0, 1, 1 / 16, consts)
        b[r] = shape_red_event(build_restricted_measure(s, 0.3, 2, "tau_t"), 0, 2, 1 / 16, consts)
    corr, se = indicator_correlation(a, b)
    assert abs(corr) < 3 * se
    request.node.summary = (f"Shape exact at rho=2^-140 / 1/4: True / False; gamma=0 Frac, Upp rates 1, 1; "
                            f"ShapeRed corr {corr:.3f} (SE {se:.3f}, rates {a.mean():.2f}, {b.mean():.2f})")


@pytest.mark.criterion(8, "oscillating walk statistics")
def test_walk(request):
    p = WalkParams(0.5, 0.25, 20)
    mom = branch_moments(run_walk(p, steps=40, n_traces=10_000, seed=1))
    for name, (mean, var) in expected_moments(p).items():
        m = mom[name]
        assert abs(m["mean"] - mean) < 3 * m["mean_se"]
        assert abs(m["var"] - var) < 3 * m["var_se"]

    q = WalkParams(0.1, np.exp(-1), 200)
    batch = run_walk(q, steps=400, n_traces=1000, seed=0)
    inv = [selection_invariants(batch.trace(r), q.d) for r in range(batch.n_traces)]
    frac_ok = np.mean([all(v.values()) for v in inv])
    assert frac_ok == 1.0
    occ = occupation_stats(batch, delta_prime=0.05)
    assert occ["n_stop"] == 10 and occ["p_stop"] >= 0.99

    w = WalkParams(0.8, 0.5, 10)
    init = lambda rng, n: w.d + rng.exponential(w.d, n)
    over = run_walk(w, init=init, steps=60, n_traces=20_000, seed=6)
    s = np.sqrt(w.sigma2)
    C, rows, ok = fit_envelope(over, [-w.d, -w.d - 0.5 * s, -w.d - s], [-w.d - 2 * s, -w.d - 3 * s])
    assert ok
    request.node.summary = (f"moments within 3 SE, invariants on {frac_ok:.0%} of traces, "
                            f"P(stop) = {occ['p_stop']:.3f}, envelope C = {C:.2f} holds on held-out thresholds")


@pytest.mark.criterion(9, "V-field covariance closed form")
def test_v_covariance(covariance_run, request):
    res, _ = covariance_run
    assert all(r["pass"] for r in res["V"])
    off = res["V_variance"]
    assert off["offset"] == pytest.approx(np.log(2))
    assert off["minus_log_xi"] - off["region"] == pytest.approx(np.log(2))
    request.node.summary = (f"{len(res['V'])} offsets within 3 SE; variance log(1/(2 xi)) = {off['region']:.4f} "
                            f"vs -log xi = {off['minus_log_xi']:.4f}, offset log 2 recorded")
