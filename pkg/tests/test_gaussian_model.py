import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quasiprob.errors import ConvergenceError, ScheduleError, ValidationError
from quasiprob.estimator import GridSpec, estimate_grid, pattern_table_for
from quasiprob.filters import FilterSpec
from quasiprob.gaussian_model import (GaussianStateParams, LockedPhases, PolynomialSweep, QuadratureDataset,
                                      UniformRandom, analytic_p_omega, normally_ordered_cf, polynomial_is_monotone,
                                      quadrature_moments, sample_dataset, schedule_from_dict, wrap_phase)

VMIN_31 = 10 ** -0.31

states = st.builds(
    GaussianStateParams,
    squeezing_db=st.floats(0, 10),
    squeeze_angle=st.floats(0, math.pi, exclude_max=True),
    displacement=st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False),
    efficiency=st.floats(0.05, 1.0),
)


# -- moments -------------------------------------------------------------------

def test_vacuum_moments():
    for phi in (0.0, 1.0, 4.0):
        assert quadrature_moments(GaussianStateParams(), phi) == (0.0, 1.0)


def test_squeezed_moments():
    s = GaussianStateParams(3.1, 0.4)
    assert quadrature_moments(s, 0.4) == pytest.approx((0.0, 0.4898), abs=1e-4)
    s = GaussianStateParams(3.1, 0.4, efficiency=0.9)
    assert quadrature_moments(s, 0.4) == pytest.approx((0.0, 0.5408), abs=1e-4)
    assert quadrature_moments(s, 0.4)[1] == pytest.approx(0.9 * VMIN_31 + 0.1, rel=1e-14)


def test_displaced_mean():
    s = GaussianStateParams(displacement=2 * np.exp(0.7j), efficiency=0.81)
    assert quadrature_moments(s, 0.7)[0] == pytest.approx(2 * 0.9 * 2, rel=1e-14)
    assert quadrature_moments(s, 0.7 + math.pi / 2)[0] == pytest.approx(0.0, abs=1e-14)


@given(states, st.floats(-10, 10))
def test_moment_symmetries(s, phi):
    m0, v0 = quadrature_moments(s, phi)
    m1, v1 = quadrature_moments(s, phi + math.pi)
    m2, _ = quadrature_moments(s, phi + 2 * math.pi)
    assert v1 == pytest.approx(v0, rel=1e-9)
    assert m1 == pytest.approx(-m0, abs=1e-9 * (1 + abs(m0)))
    assert m2 == pytest.approx(m0, abs=1e-9 * (1 + abs(m0)))
    assert v0 >= s.efficiency * s.v_min + 1 - s.efficiency - 1e-12


def test_vacuum_for_any_efficiency():
    for eta in (0.1, 0.5, 1.0):
        assert quadrature_moments(GaussianStateParams(efficiency=eta), 1.3) == pytest.approx((0.0, 1.0))


def test_moments_reject_nonfinite_phase():
    with pytest.raises(ValidationError):
        quadrature_moments(GaussianStateParams(), math.nan)


# -- params ------------------------------------------------------------------------

@pytest.mark.parametrize("kw,field", [
    ({"squeezing_db": -1}, "state.squeezing_db"),
    ({"squeeze_angle": math.pi}, "state.squeeze_angle"),
    ({"efficiency": 0.0}, "state.efficiency"),
    ({"efficiency": 1.5}, "state.efficiency"),
    ({"angle_jitter_deg": -3}, "state.angle_jitter_deg"),
    ({"displacement": complex(math.inf, 0)}, "state.displacement"),
])
def test_params_validation(kw, field):
    with pytest.raises(ValidationError) as err:
        GaussianStateParams(**kw)
    assert err.value.field == field


def test_squeeze_parameter():
    s = GaussianStateParams.from_squeeze_parameter(1.0)
    assert s.v_min == pytest.approx(math.exp(-2), rel=1e-12)


def test_params_dict_round_trip():
    s = GaussianStateParams(3.1, 1.0, 2 - 1j, 0.9, 3.0)
    assert GaussianStateParams.from_dict(s.to_dict()) == s
    with pytest.raises(ValidationError):
        GaussianStateParams.from_dict({"colour": 1})


# -- schedules -----------------------------------------------------------------

def test_locked_phases():
    p = LockedPhases(21, math.pi).phases
    assert p.size == 21 and p[0] == 0.0 and p[-1] == math.pi
    np.testing.assert_allclose(np.diff(p), math.pi / 20)
    with pytest.raises(ScheduleError):
        LockedPhases(1)


def test_sweep_must_be_monotone():
    PolynomialSweep((0, 6, 0, 0, 0), 0, 1)
    with pytest.raises(ScheduleError):
        PolynomialSweep((0, 1, -2, 0, 0), 0, 1)  # turns at t = 0.25
    assert not polynomial_is_monotone((0, 1, -2, 0, 0), 0, 1)
    assert polynomial_is_monotone((0, 1, -2, 0, 0), 0.3, 1)


def test_schedule_from_dict():
    assert isinstance(schedule_from_dict({"kind": "uniform"}), UniformRandom)
    assert schedule_from_dict({"kind": "locked", "k": 5}).k == 5
    with pytest.raises(ScheduleError):
        schedule_from_dict({"kind": "spiral"})


# -- sampling ------------------------------------------------------------------------

def test_vacuum_sample_statistics():
    d = sample_dataset(GaussianStateParams(), UniformRandom(), 100_000, seed=5)
    assert abs(d.x.mean()) < 0.02
    assert abs(d.x.var() - 1) < 0.02
    assert d.phi.min() >= 0 and d.phi.max() < 2 * math.pi


def test_sample_moments_within_five_se():
    s = GaussianStateParams(3.1, 0.6, 1.5 + 0.5j, 0.9)
    d = sample_dataset(s, LockedPhases(7, math.pi), 70_000, seed=9)
    for phi in LockedPhases(7, math.pi).phases:
        x = d.x[np.isclose(d.phi, phi)]
        m, v = quadrature_moments(s, phi)
        assert abs(x.mean() - m) < 5 * math.sqrt(v / x.size)
        assert abs(x.var() - v) < 5 * v * math.sqrt(2 / x.size)


def test_sampling_deterministic():
    s = GaussianStateParams(3.1, 0.2, 1j, 0.9, angle_jitter_deg=3)
    a = sample_dataset(s, UniformRandom(), 1000, seed=3)
    b = sample_dataset(s, UniformRandom(), 1000, seed=3)
    assert a == b and a.digest() == b.digest()
    assert sample_dataset(s, UniformRandom(), 1000, seed=4) != a


def test_jitter_broadens_squeezed_variance():
    s0 = GaussianStateParams(10.0, 0.0)
    s3 = GaussianStateParams(10.0, 0.0, angle_jitter_deg=3.0)
    lock = LockedPhases(2, math.pi)
    v0 = sample_dataset(s0, lock, 200_000, seed=1).x[::2].var()
    v3 = sample_dataset(s3, lock, 200_000, seed=1).x[::2].var()
    # E[cos^2] shift: (V_max - V_min) sin^2(3 deg) on average
    assert v3 - v0 == pytest.approx((10 - 0.1) * math.radians(3) ** 2, rel=0.1)


def test_sweep_dataset_has_times():
    d = sample_dataset(GaussianStateParams(), PolynomialSweep((0, 10, 0, 0, 0), 0, 1), 500, seed=0)
    assert d.t is not None and d.t.size == 500
    np.testing.assert_allclose(d.phi, wrap_phase(10 * d.t))


def test_sample_rejects_bad_n():
    with pytest.raises(ValidationError):
        sample_dataset(GaussianStateParams(), UniformRandom(), 0, seed=0)


def test_dataset_validation():
    with pytest.raises(ValidationError):
        QuadratureDataset(np.array([1.0]), np.array([2 * math.pi]))
    with pytest.raises(ValidationError):
        QuadratureDataset(np.array([np.nan]), np.array([0.0]))
    with pytest.raises(ValidationError):
        QuadratureDataset(np.array([1.0, 2.0]), np.array([0.0]))


@given(st.floats(-100, 100))
def test_wrap_phase_range(phi):
    w = float(wrap_phase(phi))
    assert 0 <= w < 2 * math.pi
    assert math.cos(w) == pytest.approx(math.cos(phi), abs=1e-9)


def test_subset_and_concatenate():
    d = sample_dataset(GaussianStateParams(), UniformRandom(), 100, seed=0)
    a, b = d.subset(slice(0, 40)), d.subset(slice(40, 100))
    joined = QuadratureDataset.concatenate([a, b])
    np.testing.assert_array_equal(joined.x, d.x)
    np.testing.assert_array_equal(joined.phi, d.phi)


# -- characteristic function -----------------------------------------------------------

def test_cf_vacuum_and_origin():
    np.testing.assert_allclose(normally_ordered_cf(GaussianStateParams(), [0.3, 2j, -1 + 1j]), 1.0)
    assert normally_ordered_cf(GaussianStateParams(5, 0.3, 2j, 0.8), 0j) == 1.0


def test_cf_squeezed_direction():
    s = GaussianStateParams(3.1, 0.4)
    # the quadrature phase probed by beta = |beta| e^{i theta} is theta - pi/2
    beta = np.exp(1j * (0.4 + math.pi / 2))
    assert normally_ordered_cf(s, beta).real == pytest.approx(1.2906, abs=1e-4)
    assert normally_ordered_cf(s, beta) == pytest.approx(math.exp((1 - VMIN_31) / 2), rel=1e-12)


@given(states, st.complex_numbers(max_magnitude=4, allow_nan=False, allow_infinity=False))
def test_cf_hermitian_and_bounded(s, beta):
    a, b = normally_ordered_cf(s, beta), normally_ordered_cf(s, -beta)
    assert b == pytest.approx(a.conjugate(), rel=1e-9, abs=1e-12)
    assert abs(a) <= math.exp(abs(beta) ** 2 / 2) * (1 + 1e-12)


def test_cf_matches_sample_average():
    s = GaussianStateParams(3.1, 0.4, 0.5 + 0.2j, 0.9)
    beta = 0.8 * np.exp(1.1j)
    phi = np.angle(beta) - math.pi / 2
    m, v = quadrature_moments(s, phi)
    x = np.random.default_rng(0).normal(m, math.sqrt(v), 400_000)
    emp = math.exp(abs(beta) ** 2 / 2) * np.mean(np.exp(1j * abs(beta) * x))
    assert abs(emp - normally_ordered_cf(s, beta)) < 5 * math.exp(abs(beta) ** 2 / 2) / math.sqrt(x.size)


# -- oracle ------------------------------------------------------------------------

@pytest.mark.parametrize("spec", [FilterSpec(math.inf, 1.3), FilterSpec(8, 1.3), FilterSpec(4, 1.0)])
def test_oracle_vacuum_nonnegative(spec):
    g = GridSpec(-3, 3, -3, 3, 0.5)
    p = analytic_p_omega(GaussianStateParams(), spec, g.alphas)
    assert p.min() >= -1e-8


def test_oracle_squeezed_negative_on_squeezed_axis(squeezed, inf_spec):
    im_axis = analytic_p_omega(squeezed, inf_spec, 1j * np.linspace(-3, 3, 25))
    re_axis = analytic_p_omega(squeezed, inf_spec, np.linspace(-3, 3, 25) + 0j)
    assert im_axis.min() < -1e-3
    assert re_axis.min() > im_axis.min()


def test_oracle_normalization(squeezed):
    g = GridSpec(-6, 6, -6, 6, 0.5)
    p = analytic_p_omega(squeezed, FilterSpec(8, 1.3), g.alphas)
    assert p.sum() * 0.25 == pytest.approx(1.0, abs=1e-4)


def test_oracle_small_width_is_positive_bump(squeezed):
    p = analytic_p_omega(squeezed, FilterSpec(math.inf, 0.1), np.linspace(-1, 1, 9) * 1j)
    assert p.min() > 0 and p[4] == p.max()


def test_oracle_coherent_peak():
    s = GaussianStateParams(displacement=1.5 - 0.5j, efficiency=0.64)
    g = GridSpec(-1, 3, -2, 2, 0.1)
    p = analytic_p_omega(s, FilterSpec(math.inf, 1.3), g.alphas)
    assert g.alphas.ravel()[np.argmax(p)] == pytest.approx(0.8 * (1.5 - 0.5j), abs=0.06)


def test_oracle_rejects_bad_tolerance(squeezed, inf_spec):
    with pytest.raises(ValidationError):
        analytic_p_omega(squeezed, inf_spec, 0j, tol=0)


def test_oracle_reports_non_convergence(squeezed, inf_spec):
    with pytest.raises(ConvergenceError):
        analytic_p_omega(squeezed, inf_spec, 0j, tol=1e-15, max_level=1)


def test_sampled_peak_at_displacement():
    """Sign convention self-check: sampled P of a displaced state peaks at sqrt(eta) alpha0."""
    s = GaussianStateParams(displacement=1.2 + 0.9j, efficiency=0.9)
    d = sample_dataset(s, UniformRandom(), 50_000, seed=2)
    g = GridSpec(0, 2.2, -0.4, 1.8, 0.1)
    G = estimate_grid(d, pattern_table_for(FilterSpec(math.inf, 1.3), d, g), g)
    peak = g.alphas.ravel()[np.argmax(G.P)]
    assert abs(peak - math.sqrt(0.9) * (1.2 + 0.9j)) <= 0.1 * math.sqrt(2)
