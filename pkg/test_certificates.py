import logging
import math

import numpy as np
import pytest

from certificates import (
    PRINTED_LAMBDA2_LOWER,
    PRINTED_RDY_PARAMETERS,
    DomainError,
    WeightScheme,
    alternating_bound,
    bound_table,
    branching_mean_offspring,
    check_rdy,
    decorated_binary_lambda1_lower,
    decorated_binary_lambda2_upper,
    exponential_certificate,
    exponential_drift,
    exponential_weight,
    geometric_mean_bound,
    geometric_vs_alternating,
    gw_lambda2_upper,
    kc_certificate,
    kc_drift,
    kc_feasible_submartingale,
    kc_feasible_supermartingale,
    kc_weight,
    lambda1_upper,
    lambda_a_refined,
    meeting_supercritical,
    meeting_threshold,
    periodic_lambda2_upper,
    rdy_quadratic,
    rdy_recipe,
    rdy_recipe_certificate,
    rdy_weight,
)
from topology import GaltonWatsonSpec


def _boundary(feasible, lo, hi, tol):
    """Bisect for the switch from infeasible (lo) to feasible (hi)."""
    assert not feasible(lo) and feasible(hi)
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return (lo + hi) / 2


# -- a k + b c ---------------------------------------------------------------------

def test_kc_drift_single_vertex():
    n, lam, a, b = 3, 0.4, 2.0, 0.5
    assert kc_drift(n, lam, a, b, 1, 1) == pytest.approx(a * ((n + 1) * lam - 1) - b * (1 + (n + 1) * lam))


def test_kc_drift_rejects_more_components_than_vertices():
    with pytest.raises(DomainError):
        kc_drift(2, 0.5, 1, 1, 1, 2)
    with pytest.raises(DomainError):
        kc_drift(1, 0.5, 1, 1, 1, 1)


def test_kc_boundary_at_n_2_is_two_thirds():
    assert lambda1_upper(2) == pytest.approx(2 / 3)
    assert not kc_feasible_submartingale(2, 0.66)[0]
    feasible, a, b = kc_feasible_submartingale(2, 0.67)
    assert feasible
    assert kc_certificate(2, 0.67, a, b).feasible


@pytest.mark.parametrize("n", [2, 3, 5, 10, 64])
def test_kc_feasibility_boundary_matches_closed_form(n):
    found = _boundary(lambda lam: kc_feasible_submartingale(n, lam)[0], 1 / (n + 1), 1 / (n - 1), 1e-12)
    assert found == pytest.approx(lambda1_upper(n), abs=1e-10)


@pytest.mark.parametrize("n", [2, 3, 4, 8])
def test_supermartingale_dual_feasible_below_one_over_n(n):
    assert kc_feasible_supermartingale(n, 1 / n - 1e-6)[0]
    assert not kc_feasible_supermartingale(n, 1 / n + 1e-6)[0]


# -- exponential weight ------------------------------------------------------------

def test_exponential_drift_values():
    assert exponential_drift(4, 0.25) == pytest.approx(0.0)
    assert exponential_drift(4, 0.2) == pytest.approx(-0.2)
    assert exponential_certificate(4, 0.2).feasible
    assert not exponential_certificate(4, 0.3).feasible


# -- parent-discounted weight ------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 4])
def test_printed_parameter_sets_pass_at_printed_precision(n):
    p = PRINTED_RDY_PARAMETERS[n]
    cert = check_rdy(n, p["lam"], p["r"], p["d"], p["Y"], tolerance=1e-4)
    assert cert.feasible_within_tolerance
    assert max(cert.values) < 1e-4
    assert cert.summary().startswith("feasible")
    # the rounded r leaves some inequalities a hair above zero
    assert cert.strict_count == {2: 2, 3: 3, 4: 3}[n]


@pytest.mark.parametrize("n", [2, 3, 4])
def test_recipe_near_printed_lambda_is_strictly_feasible(n):
    lam = PRINTED_RDY_PARAMETERS[n]["lam"]
    cert = rdy_recipe_certificate(n, lam * 0.999)
    assert cert.feasible
    assert cert.summary() == "feasible, 4/4 strict"


def test_recipe_matches_printed_digits():
    r, d, Y = rdy_recipe(2, PRINTED_RDY_PARAMETERS[2]["lam"])
    assert r == pytest.approx(0.7071, abs=1e-4)
    assert d == pytest.approx(0.434212, abs=1e-4)
    assert Y == pytest.approx(0.082293, abs=1e-4)


@pytest.mark.parametrize("n", [2, 3, 4, 9, 16, 64])
def test_recipe_feasible_exactly_below_refined_bound(n):
    target = lambda_a_refined(n)
    found = _boundary(
        lambda lam: not rdy_recipe_certificate(n, lam).feasible, 0.9 * target, 1.1 * target, 1e-9
    )
    assert found == pytest.approx(target, abs=1e-6)
    assert rdy_quadratic(n, 0.95 * target) < 0


def test_refined_bound_matches_printed_values():
    for n, printed in PRINTED_LAMBDA2_LOWER.items():
        assert lambda_a_refined(n) == pytest.approx(printed, abs=5e-6)


def test_check_rdy_domain():
    with pytest.raises(DomainError):
        check_rdy(2, 0.5, 0.7, 1.2, 0.1)
    cert = check_rdy(2, 0.9, 0.7071, 0.43, 0.08)
    assert not cert.feasible
    assert cert.violating_case is not None
    assert cert.summary().startswith("infeasible")


# -- bound table -------------------------------------------------------------------

def test_bound_table_examples():
    two = bound_table(2)
    assert (two.lambda1_lower, two.lambda1_upper) == (0.5, pytest.approx(2 / 3))
    assert two.branching_threshold == pytest.approx((3 + math.sqrt(17)) / 2)
    assert two.lambda2_upper == 2.0
    assert bound_table(3).branching_threshold == 2.0
    assert bound_table(64).lambda2_upper == 1.0
    assert two.printed_lambda2_lower == 0.561722
    assert set(two.provenance) >= {"lambda1_upper", "lambda_a_lower_refined"}


@pytest.mark.parametrize("n", range(2, 65))
def test_bound_sandwich(n):
    table = bound_table(n)
    assert 1 / n < table.lambda1_upper < 1 / (n - 1)
    assert (table.lambda1_upper < table.lambda_a_lower_simple) == (n >= 5)
    if n >= 3:
        assert table.lambda1_upper < table.lambda_a_lower_refined
    assert table.lambda1_lower <= table.lambda1_upper


# -- meeting process ---------------------------------------------------------------

def test_branching_threshold_is_exact_at_three():
    assert meeting_threshold(3) == 2.0
    assert branching_mean_offspring(3, 2.0) == 1.0


@pytest.mark.parametrize("n", [2, 3, 5, 10])
def test_supercritical_iff_above_threshold(n):
    threshold = meeting_threshold(n)
    for lam in np.linspace(0.05, 4.0, 80):
        if abs(lam - threshold) > 1e-9:
            assert meeting_supercritical(n, lam) == (lam > threshold)
    assert branching_mean_offspring(n, 1e-6) < 1e-10


# -- other trees --------------------------------------------------------------------

def test_alternating_bound():
    assert alternating_bound(1, 4) == pytest.approx(1 / 3)
    assert alternating_bound(9, 9) == pytest.approx(1 / 6)
    assert alternating_bound(2, 7) == alternating_bound(7, 2)


def test_heavy_tail_gw_bound_decreases():
    spec = GaltonWatsonSpec(heavy_tail_gamma=0.5, seed=0)
    values = [gw_lambda2_upper(spec, n) for n in (10**4, 10**5, 10**6, 10**7, 10**8)]
    assert values == sorted(values, reverse=True)


def test_gw_bound_needs_positive_mass():
    spec = GaltonWatsonSpec(offspring=[0.0, 0.5, 0.0, 0.5])
    with pytest.raises(DomainError):
        gw_lambda2_upper(spec, 2)
    assert gw_lambda2_upper(spec, 3) > 0


def test_periodic_and_decorated_binary_bounds():
    assert periodic_lambda2_upper(10, 1, 2, c4=1.0) == pytest.approx(math.sqrt(2 * math.log(2) * math.log(10) / 10))
    assert decorated_binary_lambda2_upper(8, c4=1.0) == periodic_lambda2_upper(10, 1, 2, c4=1.0)
    assert decorated_binary_lambda1_lower(100) == pytest.approx(math.sqrt(math.log(100)) / 100)
    with pytest.raises(DomainError):
        periodic_lambda2_upper(10, 1, 1)


def test_geometric_mean_ratio_diverges(caplog):
    assert geometric_mean_bound([1, 16], c=1.0) == pytest.approx(2.0)
    with caplog.at_level(logging.INFO, logger="certificates"):
        ratios = [geometric_vs_alternating(n, c=1.0) for n in (4, 64, 1024)]
    assert ratios == sorted(ratios)
    assert "geometric-mean" in caplog.text


# -- weights ------------------------------------------------------------------------

def test_weights_on_a_small_configuration():
    xi = [(), (0,), (1, 1)]
    assert kc_weight(xi, 2.0, 1.0) == 2 * 3 + 2
    assert exponential_weight(xi, 4) == pytest.approx(1 + 0.5 + 0.25)
    assert rdy_weight(xi, 0.5, 0.4) == pytest.approx(1 + 0.5 * 0.6 + 0.25)


def test_weight_scheme_signs():
    assert WeightScheme(kind="exponential").expected_sign(4, 0.2) == -1
    assert WeightScheme(kind="exponential").expected_sign(4, 0.3) == 0
    r, d, Y = rdy_recipe(3, 0.42)
    rdy = WeightScheme(kind="rdy", r=r, d=d, Y=Y)
    assert rdy.weight([()], 3) == 1.0
    assert rdy.expected_sign(3, 0.3) == -1
    # the fourth inequality does not involve lambda, and the printed n = 3 set misses it by 3e-9
    p = PRINTED_RDY_PARAMETERS[3]
    assert WeightScheme(kind="rdy", r=p["r"], d=p["d"], Y=p["Y"]).expected_sign(3, 0.3) == 0
    feasible, a, b = kc_feasible_submartingale(2, 0.8)
    assert WeightScheme(kind="kc", a=a, b=b).expected_sign(2, 0.8) == 1
