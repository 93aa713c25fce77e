import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from gmcweld.gmc_measures import (
    build_measure,
    build_restricted_measure,
    cdf,
    cumulative,
    dyadic_moments,
    ensemble_rows,
    interval_mass,
    inverse_cdf,
    moment_slope,
    uniform_measure,
    zeta_p,
)
from gmcweld.whitenoise_fields import DomainError, sample_field_stack


@pytest.fixture(scope="module")
def ensemble():
    return sample_field_stack(256, 0.25, 4, seed=11, replicas=2000, substeps=4, with_v=False)


def test_gamma_zero_is_uniform():
    s = sample_field_stack(128, 0.5, 3, seed=1)
    m = build_measure(s, 0.0)
    assert np.all(m.masses == 1 / 128)
    assert m.total == 1.0
    r = build_restricted_measure(s, 0.0, 1)
    assert np.allclose(r.masses, 1 / 128) and r.total == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("gamma", [1.5, np.sqrt(2), -0.1])
def test_gamma_range(gamma):
    s = sample_field_stack(16, 0.5, 1, seed=1)
    with pytest.raises(DomainError):
        build_measure(s, gamma)


def test_restricted_kinds_and_lattice():
    s = sample_field_stack(64, 0.5, 2, seed=1, substeps=4)
    assert build_restricted_measure(s, 0.3, 0.25, "nu_t").kind == "nu_t"
    with pytest.raises(DomainError):
        build_restricted_measure(s, 0.3, 0.3)
    with pytest.raises(DomainError):
        build_restricted_measure(s, 0.3, 1, "mu_t")


def test_masses_positive_and_cdf_monotone(ensemble):
    m = build_measure(ensemble, 0.3).masses[:5]
    assert np.all(m > 0)
    x = np.linspace(0, 1, 301)
    F = cumulative(m, x)
    assert np.all(np.diff(F, axis=-1) >= 0)
    assert np.allclose(F[:, 0], 0) and np.allclose(F[:, -1], m.sum(axis=-1))


def test_mean_total_mass_is_one(ensemble):
    tot = build_measure(ensemble, 0.3).total
    se = tot.std(ddof=1) / np.sqrt(tot.size)
    assert abs(tot.mean() - 1) < 3 * se


def test_martingale_refinement(ensemble):
    a = build_measure(ensemble, 0.3, depth_cutoff=2).total
    b = build_measure(ensemble, 0.3, depth_cutoff=4).total
    diff = b - a
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / np.sqrt(diff.size)


def test_two_stacks_independent(ensemble):
    m = build_measure(ensemble, 0.3).masses
    a = m[0::2, :64].sum(axis=1)
    b = m[1::2, :64].sum(axis=1)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 3 / np.sqrt(a.size)


def test_interval_mass_examples():
    u = uniform_measure(64)
    assert interval_mass(u, 0, 0.25) == pytest.approx(0.25, abs=1e-15)
    s = sample_field_stack(64, 0.5, 3, seed=2)
    m = build_measure(s, 0.3)
    assert interval_mass(m, 0.9, 1.1) == pytest.approx(interval_mass(m, 0.9, 1.0) + interval_mass(m, 0.0, 0.1),
                                                       abs=1e-15)
    with pytest.raises(DomainError):
        interval_mass(m, 0.5, 0.4)
    with pytest.raises(DomainError):
        interval_mass(m, 0.0, 1.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(0, 0.5), st.floats(0, 0.5))
def test_interval_mass_additive(a, l1, l2):
    m = build_measure(sample_field_stack(32, 0.5, 2, seed=3), 0.4)
    b, c = a + l1, a + l1 + l2
    assert interval_mass(m, a, c) == pytest.approx(interval_mass(m, a, b) + interval_mass(m, b, c), abs=1e-12)


def test_cdf_examples():
    u = uniform_measure(32)
    assert inverse_cdf(u, 0.25) == pytest.approx(0.25, abs=1e-15)
    m = build_measure(sample_field_stack(32, 0.5, 2, seed=3), 0.4)
    assert cdf(m, 1.0) == pytest.approx(1.0, abs=1e-15)


def test_inverse_cdf_round_trip_and_bisection():
    m = build_measure(sample_field_stack(512, 0.25, 5, seed=5), 0.5)
    x = np.random.default_rng(0).uniform(0, 1, 1000)
    assert np.max(np.abs(inverse_cdf(m, cdf(m, x)) - x)) < 1e-12
    for q in (0.013, 0.5, 0.77):
        ref = optimize.brentq(lambda y: cdf(m, y) - q, 0, 1, xtol=1e-15)
        assert inverse_cdf(m, q) == pytest.approx(ref, abs=1e-12)


def test_inverse_cdf_single_measure_only(ensemble):
    with pytest.raises(DomainError):
        inverse_cdf(build_measure(ensemble, 0.3).masses[:2], 0.5)


def test_zeta():
    assert zeta_p(1, 0.7) == 1
    assert zeta_p(2, 0.5) == pytest.approx(1.75)
    assert zeta_p(2, 0.3) == pytest.approx(1.91)


@given(st.floats(0, 1.4))
def test_zeta_one_and_zero(gamma):
    assert zeta_p(1, gamma) == 1 and zeta_p(0, gamma) == 0


def test_moment_slope_p1_is_one(ensemble):
    masses = build_measure(ensemble, 0.3).masses
    est = moment_slope(masses, 1.0, [2.0**-k for k in range(2, 8)], 0.3, n_boot=50)
    assert est.slope == pytest.approx(1.0, abs=1e-12)
    assert not est.heavy_tail


def test_moment_slope_warns_on_heavy_tail(ensemble):
    masses = build_measure(ensemble, 1.2).masses[:50]
    with pytest.warns(UserWarning):
        est = moment_slope(masses, 2.0, [2.0**-4, 2.0**-5], 1.2, n_boot=10)
    assert est.heavy_tail


def test_dyadic_moments_need_whole_cells():
    with pytest.raises(DomainError):
        dyadic_moments(np.ones((2, 64)) / 64, 2, [0.3])


def test_ensemble_rows_layout():
    m = np.ones((2, 8)) / 8
    rows = ensemble_rows(m, [0.5, 0.25])
    assert len(rows) == 2 * 2 + 2 * 4
    assert rows[0] == (0, 0.5, 0, 0.5)
