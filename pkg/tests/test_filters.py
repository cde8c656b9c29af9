import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import gamma, j0

from quasiprob.errors import ValidationError
from quasiprob.filters import (FilterSpec, FilterTable, build_filter_table, filter_value, filter_value_hankel,
                               lagrange4, omega_base)


def closed_form(r, w):
    u = r / (2 * w)
    return (2 / math.pi) * (math.acos(u) - u * math.sqrt(1 - u * u)) if u < 1 else 0.0


def brute_autocorrelation(q, w, r, h=0.01):
    """Omega(r) = integral omega(beta) omega(beta + r) d^2 beta by a plain trapezoid grid."""
    norm = 2 ** (1 / q) / w * math.sqrt(q / (2 * math.pi * gamma(2 / q)))
    edge = w * 60 ** (1 / q)
    ax = np.arange(-edge - r, edge + h, h)
    X, Y = np.meshgrid(ax, np.arange(-edge, edge + h, h), indexing="ij")
    a = norm * np.exp(-(np.hypot(X, Y) / w) ** q)
    b = norm * np.exp(-(np.hypot(X + r, Y) / w) ** q)
    return float(np.sum(a * b) * h * h)


# -- base map --------------------------------------------------------------------

def test_omega_base_at_origin():
    expected = 2 ** 0.125 * math.sqrt(8 / (2 * math.pi * gamma(0.25)))
    assert omega_base(FilterSpec(8, 1.0), 0.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.6462, abs=1e-4)


def test_omega_base_profile_and_decay():
    s = FilterSpec(4, 2.0)
    assert omega_base(s, 2.0) == pytest.approx(math.exp(-1) * omega_base(s, 0.0), rel=1e-12)
    assert omega_base(FilterSpec(8, 1.0), 50.0) == 0.0


def test_omega_base_unit_norm():
    s = FilterSpec(8, 1.3)
    val, _ = quad(lambda r: 2 * math.pi * r * omega_base(s, r) ** 2, 0, 4 * s.w, epsabs=1e-13)
    assert val == pytest.approx(1.0, abs=1e-10)


def test_omega_base_rejects_analytic():
    with pytest.raises(ValidationError):
        omega_base(FilterSpec(math.inf, 1.0), 0.0)


# -- filter values ------------------------------------------------------------------

@pytest.mark.parametrize("q", [4, 8, math.inf])
@pytest.mark.parametrize("w", [1.0, 1.3, 1.8])
def test_normalization(q, w):
    assert abs(filter_value(FilterSpec(q, w), 0.0) - 1.0) < 1e-6


def test_analytic_values():
    s = FilterSpec(math.inf, 1.0)
    assert filter_value(s, 1.0) == pytest.approx((2 / math.pi) * (math.pi / 3 - math.sqrt(3) / 4), abs=1e-10)
    assert filter_value(s, 2.0) == 0.0
    assert np.all(filter_value(s, np.linspace(2.0, 20.0, 50)) == 0.0)
    r = np.linspace(0, 1.99, 37)
    np.testing.assert_allclose(filter_value(s, r), [closed_form(x, 1.0) for x in r], atol=1e-14)


@pytest.mark.parametrize("q,w,r", [(8, 1.0, 0.7), (8, 1.3, 1.9), (4, 1.0, 1.2), (4, 1.8, 0.4)])
def test_finite_q_matches_brute_force(q, w, r):
    assert filter_value(FilterSpec(q, w), r) == pytest.approx(brute_autocorrelation(q, w, r), abs=1e-8)


def test_hankel_cross_check():
    s = FilterSpec(8, 1.3)
    r = np.array([0.0, 0.5, 1.3, 2.0, 2.9])
    np.testing.assert_allclose(filter_value_hankel(s, r), filter_value(s, r), atol=1e-9)


def test_scaling_law():
    r = np.linspace(0, 6, 13)
    for q in (4, 8):
        np.testing.assert_allclose(filter_value(FilterSpec(q, 1.3), r * 1.3), filter_value(FilterSpec(q, 1.0), r),
                                   rtol=1e-8, atol=1e-300)


def test_bounded_by_one(q8_table):
    assert np.all(np.abs(q8_table.values) <= 1.0 + 1e-8)


@pytest.mark.parametrize("q", [4, 8, math.inf])
def test_fourier_transform_nonnegative(q):
    s = FilterSpec(q, 1.0)
    table = build_filter_table(s)
    end = s.support
    r = np.linspace(0, end, 20001)
    f = table(r)
    k = np.linspace(0, 12, 241)
    ft = 2 * math.pi * np.trapezoid(j0(np.outer(k, r)) * f * r, r, axis=1)
    assert ft.min() > -1e-6


def test_rapid_decay(q8_table):
    b = q8_table.b_cut
    assert abs(q8_table.values[-1]) * math.exp(b * b / 2) < 1e-20


def test_negative_radius_rejected():
    with pytest.raises(ValidationError):
        filter_value(FilterSpec(8, 1.0), -0.1)


# -- specs ---------------------------------------------------------------------

@pytest.mark.parametrize("q", [2.0, 1.0, float("nan")])
def test_spec_rejects_small_q(q):
    with pytest.raises(ValidationError) as err:
        FilterSpec(q, 1.0)
    assert err.value.field == "filter.q"


@pytest.mark.parametrize("w", [0.0, -1.0, math.inf])
def test_spec_rejects_bad_width(w):
    with pytest.raises(ValidationError) as err:
        FilterSpec(8, w)
    assert err.value.field == "filter.w"


def test_spec_parse():
    assert FilterSpec.parse("q=8,w=1.3") == FilterSpec(8, 1.3)
    assert FilterSpec.parse(" w=2 , q=inf ") == FilterSpec(math.inf, 2.0)
    assert FilterSpec.parse(str(FilterSpec(4.5, 0.7))) == FilterSpec(4.5, 0.7)
    for bad in ("q=8", "q=8,w=1,x=2", "q8,w=1", "q=2,w=1"):
        with pytest.raises(ValidationError):
            FilterSpec.parse(bad)


@given(st.floats(2.01, 50), st.floats(0.05, 20))
def test_spec_round_trip(q, w):
    s = FilterSpec(q, w)
    assert FilterSpec.parse(str(s)) == s
    assert s.b_cut == pytest.approx(8 * w)


# -- tables ------------------------------------------------------------------------

def test_analytic_table_invariants():
    t = build_filter_table(FilterSpec(math.inf, 1.3))
    assert t.values.size == 4097
    assert t.values[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(t.values[t.nodes >= 2.6] == 0.0)
    t.check_invariants()


def test_finite_table_midpoints(q8_table, rng):
    mids = (rng.integers(0, 4096, 12) + 0.5) * q8_table.step
    np.testing.assert_allclose(q8_table(mids), filter_value(q8_table.spec, mids), atol=1e-6)
    assert q8_table.values[-1] < 1e-50
    q8_table.check_invariants()


def test_table_rejects_few_nodes():
    with pytest.raises(ValidationError):
        build_filter_table(FilterSpec(8, 1.0), nodes=100)


def test_table_rejects_q2():
    with pytest.raises(ValidationError):
        build_filter_table(FilterSpec(2.0, 1.0))


@pytest.mark.parametrize("suffix", [".csv", ".npz"])
def test_table_save_load(q8_table, tmp_path, suffix):
    path = tmp_path / f"t{suffix}"
    q8_table.save(path)
    assert FilterTable.load(path) == q8_table


def test_table_cache(tmp_path):
    s = FilterSpec(6, 0.9)
    a = build_filter_table(s, nodes=512, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("filter-*.npz"))) == 1
    assert build_filter_table(s, nodes=512, cache_dir=tmp_path) == a


def test_table_beyond_cut_is_zero(q8_table):
    assert q8_table(q8_table.b_cut * 1.5) == 0.0


@settings(max_examples=30)
@given(st.floats(-3, 3), st.floats(0.05, 1.0))
def test_lagrange4_exact_for_cubics(x0, step):
    xs = x0 + step * np.arange(12)
    poly = lambda x: 0.3 * x ** 3 - x ** 2 + 2 * x - 0.5
    probe = np.linspace(xs[0], xs[-1], 29)
    np.testing.assert_allclose(lagrange4(poly(xs), x0, step, probe), poly(probe), atol=1e-8)
