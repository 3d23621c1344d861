import logging
import math

import numpy as np
import pytest
from pydantic import ValidationError

from starlab import (
    Q,
    SingularityError,
    StarParameterError,
    StarParams,
    StarState,
    drift_W,
    drift_scale,
    extinction_window,
    extinction_window_curve,
    extinction_window_experiment,
    generator_rates,
    hitting_probability_exact,
    hitting_probability_mc,
    holding_curve,
    holding_experiment,
    relay_curve,
    relay_experiment,
    relay_lower_bound,
    ring_threshold,
    scale_functions,
    scale_hitting_heuristic,
    scale_residuals,
    star_table,
    supermartingale_hitting_bound,
    theorem_star_report,
    transmission_probability_crude,
    transmission_probability_refined,
    weight_W,
)
from topology import Configuration


# -- chain ----------------------------------------------------------------------

def test_generator_rates_from_root_only_state():
    params = StarParams(n=4, a=4)
    assert params.lam == 2
    assert dict(generator_rates((1, 0), params)) == {StarState(0, 0): 1.0, StarState(1, 1): 8.0}


def test_empty_state_is_absorbing():
    assert generator_rates((0, 0), StarParams(n=16, a=4)) == []


def test_generator_rejects_impossible_state():
    with pytest.raises(StarParameterError):
        generator_rates((1, 17), StarParams(n=16, a=4))


def test_star_constants_are_validated():
    with pytest.raises(ValidationError):
        StarParams(n=64, a=4, c11=7)


def test_threshold_n_at_default_constants():
    assert StarParams(n=64, a=4).threshold_n() == pytest.approx(600.0)
    assert StarParams(n=64, a=4).hypothesis_violations()
    assert StarParams(n=1024, a=6).hypothesis_violations() == []


# -- weight and drift ----------------------------------------------------------

def test_weight_examples():
    params = StarParams(n=1024, a=6)
    assert weight_W((0, 0), params) == 1.0
    for x in range(0, params.n + 1, 37):
        assert 0 < weight_W((1, x), params) < weight_W((0, x), params)
    # y = a sqrt(n) / c10 exactly here, so W sits on the lower end
    exponent = -params.a**2 / (10 * params.c10)
    w = weight_W((0, params.y), params)
    assert w >= math.exp(exponent) * (1 - 1e-12)
    assert w <= math.exp(exponent + params.a / (10 * math.sqrt(params.n)))


def test_weight_needs_a_at_most_root_n():
    with pytest.raises(StarParameterError):
        weight_W((0, 1), StarParams(n=4, a=3))


@pytest.mark.parametrize("n, a", [(256, 4), (1024, 8), (4096, 16)])
def test_drift_vanishes_without_root_and_is_nonpositive_with_it(n, a):
    params = StarParams(n=n, a=a)
    for x in range(n + 1):
        state = StarState(0, x)
        assert abs(drift_W(state, params)) <= 1e-12 * max(drift_scale(state, params), 1e-300)
    for x in range(math.ceil(a * math.sqrt(n) / 4)):
        assert drift_W((1, x), params) <= 0


def test_star_table_covers_every_state():
    table = star_table(StarParams(n=16, a=4))
    assert len(table) == 34
    assert list(table.columns) == ["I", "x", "W", "drift", "drift_scale"]


# -- hitting ----------------------------------------------------------------------

def test_hitting_trivial_starts():
    params = StarParams(n=64, a=4)
    assert hitting_probability_exact(params, (0, 9), 3, 8) == 0.0
    assert hitting_probability_exact(params, (1, 2), 3, 8) == 1.0


def test_exact_hitting_agrees_with_monte_carlo():
    params = StarParams(n=64, a=4)
    lower, upper = math.ceil(params.drop_level), min(math.ceil(params.rise_level), params.n)
    assert (params.y, lower, upper) == (4, 3, 8)
    exact = hitting_probability_exact(params, (0, params.y), lower, upper)
    mc = hitting_probability_mc(params, (0, params.y), lower, upper, runs=10_000, seed=17)
    sigma = math.sqrt(exact * (1 - exact) / mc.runs)
    assert abs(mc.value - exact) <= 3 * sigma
    assert exact <= supermartingale_hitting_bound(params, (0, params.y), lower) + 1e-12


def test_theorem_report_in_hypothesis_mode():
    params = StarParams(n=1024, a=6)
    params.require_theorem_mode()
    report = theorem_star_report(params)
    assert (report.y, report.lower, report.upper) == (24, 16, 46)
    assert report.hypotheses_hold
    assert report.within_supermartingale_bound
    assert report.exact <= report.supermartingale_bound
    # the exp(-a^2/c5) bound holds here, though not at every hypothesis-satisfying point
    assert report.exact <= report.theorem_bound
    assert report.theorem_bound == pytest.approx(math.exp(-36 / 25))


def test_theorem_mode_refuses_small_star():
    with pytest.raises(StarParameterError, match="must exceed"):
        StarParams(n=64, a=4).require_theorem_mode()


# -- transmission ------------------------------------------------------------------

def test_Q_values():
    assert Q(0.0, 3.0) == 0.0
    assert Q(1.0, 1.0) == pytest.approx(0.432332, abs=1e-6)
    assert Q(60.0, 2.0) == pytest.approx(2 / 3)
    values = [Q(s, 0.7) for s in np.linspace(0, 10, 50)]
    assert values == sorted(values)
    assert max(values) <= 0.7 / 1.7


def test_refined_transmission_dominates_crude():
    for r in (0.1, 0.5, 1.0, 2.0):
        for lam in (0.01, 0.3, 1.0, 4.0):
            assert transmission_probability_refined(r, lam) >= transmission_probability_crude(r, lam)


@pytest.mark.parametrize("n", [25, 64, 400, 10_000])
def test_crude_ring_threshold_below_star_bound(n):
    assert ring_threshold(n, math.log(2)) <= 4 / (math.sqrt(n) - 4)


def test_refined_ring_threshold_scales_like_e_over_root_n():
    scaled = [math.sqrt(n) * ring_threshold(n, 1.0, refined=True) for n in (1e4, 1e6, 1e8)]
    assert abs(scaled[-1] - math.e) < 1e-2
    assert abs(scaled[-1] - math.e) < abs(scaled[0] - math.e)


# -- scale functions ---------------------------------------------------------------

def test_scale_functions_at_zero():
    f, g = scale_functions(4.0, [0.0])
    assert f[0] == 0.0
    assert g[0] == pytest.approx(-0.25)


def test_scale_residuals_vanish():
    xs = np.linspace(0.0, 3.6, 37)
    first, second = scale_residuals(4.0, xs, h=1e-4)
    assert np.max(np.abs(first)) < 1e-6
    assert np.max(np.abs(second)) < 1e-6


def test_scale_grid_at_pole_raises():
    with pytest.raises(SingularityError):
        scale_functions(4.0, [1.0, 4.0])


def test_scale_heuristic_is_logged(caplog):
    with caplog.at_level(logging.INFO, logger="starlab"):
        p, reference = scale_hitting_heuristic(4.0, 2.0, 4.0, 8.0)
    assert 0 < p < 1 and reference > 0
    assert "scale heuristic" in caplog.text


# -- experiments ---------------------------------------------------------------------

def test_holding_window_shorter_than_one_unit_gives_zero():
    params = StarParams(n=64, a=1)
    assert params.holding_horizon < 1
    assert holding_experiment(params, runs=20, seed=1).value == 0.0


def test_holding_curve_is_nondecreasing_within_error():
    curve = holding_curve(1024, [9.0, 10.0, 12.0], runs=200, seed=12)
    assert all(e.detail["horizon"] > 1 and e.runs == 200 for e in curve)
    for lower, upper in zip(curve, curve[1:]):
        assert upper.ci_high >= lower.ci_low


@pytest.mark.slow
def test_holding_fraction_clears_floor():
    params = StarParams(n=4096, a=16)
    est = holding_experiment(params, runs=200, seed=4096)
    assert est.ci_low >= math.exp(-1) / 5


def test_relay_is_certain_at_the_root_and_ordered():
    params = StarParams(n=1024, a=12)
    curve = relay_curve(params, r_max=3, runs=60, seed=9)
    assert curve[0].value == 1.0
    values = [e.value for e in curve]
    assert values == sorted(values, reverse=True)
    assert all(e.detail["ordered"] for e in curve)
    assert curve[3].ci_low > 0
    assert relay_lower_bound(params, 0) is None


def test_relay_experiment_matches_curve_endpoint():
    params = StarParams(n=256, a=8)
    single = relay_experiment(params, 2, runs=20, seed=3, horizon=5.0)
    curve = relay_curve(params, 2, runs=20, seed=3, horizon=5.0)
    assert single == curve[2]


def test_extinction_window_of_empty_configuration_is_certain():
    assert extinction_window_experiment(64, 2.0, (0, 0), runs=10, seed=0).value == 1.0


def test_extinction_window_requires_subcritical_drive():
    with pytest.raises(StarParameterError):
        extinction_window_experiment(16, 4.0, (1, 0), runs=10, seed=0)


def test_extinction_window_all_leaves_reports_value():
    est = extinction_window_experiment(4096, 2.0, (0, 4096), runs=400, seed=5)
    assert est.detail["window"] == pytest.approx(extinction_window(4096, 4096))
    assert est.ci_low >= est.detail["floor"]


def test_extinction_curve_is_coupled():
    eta = Configuration.of([()] + [(i,) for i in range(10)])
    curve = extinction_window_curve(256, [0.5, 1.0, 2.0], eta, runs=50, seed=8)
    assert curve[0].detail["coupling_violations"] == 0
    values = [e.value for e in curve]
    assert values == sorted(values, reverse=True)
