import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmcweld.whitenoise_fields import (
    CovarianceError,
    DomainError,
    covariance_check,
    cross_overlap_area,
    cross_overlap_quad,
    field,
    field_at,
    increment,
    log_kernel,
    point_variance,
    region_halfwidth,
    sample_field_stack,
    slab_overlap_area,
    slab_overlap_quad,
    v_covariance,
)

LOG2 = np.log(2)

# mpmath quadrature of the raw overlap integrands at 30 digits
FROZEN_SLAB = [
    ("H", 1 / 16, 1.0, 0.1, 1.1459052135135035),
    ("H", 0.01, np.inf, 0.3, 0.9050825360602872),
    ("V", 0.05, 0.5, 0.02, 1.9425850929940456),
    ("H", 1 / 256, 1 / 16, 0.003, 2.050993239798083),
]
FROZEN_CROSS = [
    (1 / 64, 1 / 4, 0.01, 2.1603423132173918),
    (1 / 256, 1 / 16, 0.002, 2.2917909810189321),
]


def test_halfwidth_examples():
    assert region_halfwidth("H", 2 / np.pi) == pytest.approx(0.25, abs=1e-15)
    assert region_halfwidth("V", 0.4) == pytest.approx(0.2, abs=1e-15)
    assert region_halfwidth("V", 0.6) == 0.0
    y = 1e-7
    assert region_halfwidth("H", y) == pytest.approx(y / 2, rel=1e-12)


@given(st.floats(1e-6, 1e3))
def test_h_halfwidth_below_half(y):
    assert 0 < region_halfwidth("H", y) < 0.5


@pytest.mark.parametrize("y", [0.0, -1.0])
def test_halfwidth_rejects_nonpositive(y):
    with pytest.raises(DomainError):
        region_halfwidth("H", y)


def test_unknown_kind():
    with pytest.raises(DomainError):
        region_halfwidth("W", 1.0)


def test_overlap_examples():
    assert slab_overlap_area("H", 0, np.inf, 0.5) == pytest.approx(LOG2, abs=1e-12)
    assert slab_overlap_area("H", 0, np.inf, 0.25) == pytest.approx(1.5 * LOG2, abs=1e-12)
    assert slab_overlap_area("V", 0.25, 0.5, 0.0) == pytest.approx(LOG2, abs=1e-14)


def test_overlap_rejects_empty_slab():
    with pytest.raises(DomainError):
        slab_overlap_area("H", 0.5, 0.5, 0.1)
    with pytest.raises(DomainError):
        slab_overlap_quad("V", 0.4, 0.1, 0.0)


@pytest.mark.parametrize("kind,a,b,t,ref", FROZEN_SLAB)
def test_overlap_frozen(kind, a, b, t, ref):
    assert slab_overlap_area(kind, a, b, t) == pytest.approx(ref, abs=1e-12)
    assert slab_overlap_quad(kind, a, b, t) == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("a,b,t,ref", FROZEN_CROSS)
def test_cross_frozen(a, b, t, ref):
    assert cross_overlap_area(a, b, t) == pytest.approx(ref, abs=1e-12)
    assert cross_overlap_quad(a, b, t) == pytest.approx(ref, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["H", "V"]), st.floats(1e-3, 2.0), st.floats(1.05, 40.0), st.floats(0, 1))
def test_closed_form_matches_quadrature(kind, a, ratio, t):
    b = a * ratio
    assert slab_overlap_area(kind, a, b, t) == pytest.approx(slab_overlap_quad(kind, a, b, t), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 0.4), st.floats(1.05, 20.0), st.floats(0, 1))
def test_cross_closed_form_matches_quadrature(a, ratio, t):
    b = a * ratio
    assert cross_overlap_area(a, b, t) == pytest.approx(cross_overlap_quad(a, b, t), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1.1, 10.0), st.floats(1.1, 10.0), st.floats(0, 1))
def test_overlap_additive_over_slabs(a, r1, r2, t):
    b, c = a * r1, a * r1 * r2
    for kind in ("H", "V"):
        whole = slab_overlap_area(kind, a, c, t)
        assert whole == pytest.approx(slab_overlap_area(kind, a, b, t) + slab_overlap_area(kind, b, c, t), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 0.5), st.floats(0, 1))
def test_overlap_symmetric_and_maximal_at_zero(a, t):
    for kind in ("H", "V"):
        v = slab_overlap_area(kind, a, 1.0, t)
        assert v == pytest.approx(slab_overlap_area(kind, a, 1.0, 1 - t), abs=1e-12)
        assert v <= slab_overlap_area(kind, a, 1.0, 0.0) + 1e-12


@pytest.mark.parametrize("t", [0.05, 0.1, 0.25, 0.4, 0.5])
def test_full_field_limit_is_log_kernel(t):
    # finite cutoff at 1e-9 stands in for the limit
    assert slab_overlap_quad("H", 1e-9, np.inf, t) == pytest.approx(float(log_kernel(t)), abs=1e-3)


def test_v_covariance_regimes_match_quadrature():
    delta, r = 1 / 64, 0.5
    for dist in (0.0, 0.004, 1 / 64, 0.1, 0.3):
        assert v_covariance(delta, r, dist) == pytest.approx(slab_overlap_quad("V", delta, r, dist), abs=1e-9)
    assert v_covariance(delta, r, 0.0) == pytest.approx(np.log(1 / (2 * delta)), abs=1e-14)
    with pytest.raises(DomainError):
        v_covariance(0.6, 0.7, 0.0)


def test_point_variance_of_v_is_offset_by_log2():
    xi = 2.0**-12
    assert point_variance("V", 0.5, 12) == pytest.approx(-np.log(xi) - LOG2, abs=1e-12)


def test_stack_shapes_and_determinism():
    a = sample_field_stack(1024, 0.25, 8, seed=1)
    b = sample_field_stack(1024, 0.25, 8, seed=1)
    assert a.H.shape == (9, 1024) and a.V.shape == (8, 1024)
    assert np.array_equal(a.H, b.H) and np.array_equal(a.V, b.V) and a.G == b.G


def test_replica_streams_split_freely():
    whole = sample_field_stack(64, 0.5, 3, seed=4, replicas=5)
    part = sample_field_stack(64, 0.5, 3, seed=4, replicas=2, first_replica=3)
    assert np.array_equal(whole.H[3:], part.H)
    assert np.array_equal(whole.V[3:], part.V)


def test_with_v_false_keeps_h():
    a = sample_field_stack(64, 0.5, 3, seed=2, replicas=3)
    b = sample_field_stack(64, 0.5, 3, seed=2, replicas=3, with_v=False)
    assert np.array_equal(a.H, b.H)
    assert not b.V.any()


@pytest.mark.parametrize("M,rho,depth", [(100, 0.5, 2), (64, 1.0, 2), (64, 0.5, -1)])
def test_stack_rejects_bad_parameters(M, rho, depth):
    with pytest.raises(DomainError):
        sample_field_stack(M, rho, depth, seed=0)


def test_prefix_sums():
    s = sample_field_stack(128, 0.5, 4, seed=3)
    assert np.array_equal(field(s, 0, "H"), s.H[0])
    for i in (0, 7, 127):
        assert field_at(s, i, 0) == s.H[0, i]
        for k in range(4):
            assert field_at(s, i, k + 1) - field_at(s, i, k) == pytest.approx(s.H[k + 1, i], abs=1e-13)
    assert np.allclose(increment(s, 3, 1, "V"), s.V[1] + s.V[2])
    assert not field(s, 0, "V").any()
    with pytest.raises(IndexError):
        field_at(s, 128, 1)
    with pytest.raises(DomainError):
        field(s, 5, "H")
    with pytest.raises(DomainError):
        field(s, 1.5, "H")


def _layer_moments(M, rho, depth, replicas, seed, batch=2000):
    # per-layer point variances and the cross product of the first two H layers
    s1 = s2 = 0
    cross = 0
    done = 0
    while done < replicas:
        b = min(batch, replicas - done)
        st_ = sample_field_stack(M, rho, depth, seed, replicas=b, first_replica=done)
        x = np.concatenate([st_.H[:, :, 0], st_.V[:, :, 0]], axis=1)
        s1 = s1 + x.sum(axis=0)
        s2 = s2 + (x**2).sum(axis=0)
        cross = cross + (st_.H[:, 1, 0] * st_.H[:, 2, 0]).sum()
        done += b
    return s1 / replicas, s2 / replicas, cross / replicas


def test_layer_variances_match_oracle():
    M, rho, depth, R = 1024, 0.25, 8, 10_000
    mean, sq, cross = _layer_moments(M, rho, depth, R, seed=1)
    var = sq - mean**2
    edges = [np.inf] + [rho**k for k in range(depth + 1)]
    refs = [slab_overlap_quad("H", edges[q + 1], edges[q], 0.0) for q in range(depth + 1)]
    refs += [slab_overlap_quad("V", edges[q + 2], edges[q + 1], 0.0) if edges[q + 2] < 0.5 else 0.0
             for q in range(depth)]
    refs = np.array(refs)
    se = refs * np.sqrt(2 / R)
    live = refs > 0
    assert np.all(np.abs(var[live] - refs[live]) < 3 * se[live])
    # disjoint layers are uncorrelated
    se_x = np.sqrt(refs[1] * refs[2] / R)
    assert abs(cross) < 3 * se_x


def test_depth_zero_variance():
    R = 10_000
    st_ = sample_field_stack(16, 0.5, 0, seed=9, replicas=R)
    ref = slab_overlap_area("H", 1.0, np.inf, 0.0)
    assert st_.H.shape == (R, 1, 16)
    assert abs(st_.H[:, 0, 0].var() - ref) < 3 * ref * np.sqrt(2 / R)


def test_g_variance():
    R = 20_000
    G = sample_field_stack(2, 0.5, 0, seed=5, replicas=R).G
    assert abs(G.var() - 2 * LOG2) < 3 * 2 * LOG2 * np.sqrt(2 / R)


def test_ensemble_covariance_against_oracle():
    res = covariance_check(256, 0.5, 4, seed=2, replicas=3000)
    assert res["H_pass_fraction"] >= 0.95
    assert res["V_pass_fraction"] >= 0.95
    assert res["V_variance"]["offset"] == pytest.approx(LOG2)
    near = [r for r in res["V"] if r["regime"] == "near"]
    assert near and all(abs(r["closed_form"] - r["quad"]) < 1e-9 for r in near)


def test_too_coarse_circulant_is_reported(monkeypatch):
    import gmcweld.whitenoise_fields as wf

    def bad(kind, lo, hi, M):
        c = np.zeros(M)
        c[0], c[1], c[-1] = 1.0, 1.0, 1.0
        return c

    wf._layer_root.cache_clear()
    monkeypatch.setattr(wf, "layer_covariance", bad)
    with pytest.raises(CovarianceError):
        wf._layer_root("H", 0.5, 1.0, 8)
    wf._layer_root.cache_clear()
