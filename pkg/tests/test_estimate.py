import json
import math

import numpy as np
import pytest

from ldlab import catalog as cat
from ldlab.engine import SimConfig, TargetSet
from ldlab.estimate import (EstimateReport, battery_fitted_N, check_aleksandrov_scaling,
                            check_discounted_whole_space, check_elliptic_aleksandrov, check_exit_lower_tail,
                            check_hitting, check_lower_occupation, check_psi_exp_tail, check_psi_moments,
                            counterexample_sweep, linear_fit)
from ldlab.ledger import InfeasibleLedger, choose_kn, ledger
from ldlab.model import ScalarField

CFG = SimConfig(time_step_h=2e-3, n_paths=2000, master_seed=7)
BM = cat.catalog("standard-bm")
HALF = ScalarField.indicator_ball(2, 0.5)


# ------------------------------------------------------------------ ledger


def test_ledger_without_drift():
    L = ledger(2, 0.0)
    assert L.N_db == 0.5
    assert (L.k, L.n, L.R) == (1, 3, 8.0)
    assert L.beta == pytest.approx(math.log(2) ** 2 / 256)
    assert L.t0 == pytest.approx(math.log(1.5) / 64)
    assert L.rho == 19.0 and L.N_tail == pytest.approx(8 / math.log(2))


def _min_n_brute(d, A, n_cap=200):
    sech = 1 / math.cosh(1)
    for n in range(1, n_cap):
        for k in range(1, n):
            b = sech + A / k ** (1 / d)
            if b < 1 and b ** (n - k) <= 0.5:
                return k, n
    return None


@pytest.mark.parametrize("d,B", [(2, 0.0), (2, 0.3), (2, 1.0), (3, 1.0), (3, 2.0)])
def test_ledger_choice_is_admissible_and_minimal(d, B):
    L = ledger(d, B)
    assert L.base < 1
    assert L.base ** (L.n - L.k) <= 0.5
    assert L.n == _min_n_brute(d, L.N_db * B)[1]


def test_ledger_recipes():
    a = ledger(2, 1.0, recipe="min-n")
    b = ledger(2, 1.0, recipe="min-k")
    assert b.k <= a.k and a.n <= b.n
    with pytest.raises(ValueError):
        ledger(2, 1.0, recipe="other")


def test_ledger_rejections():
    with pytest.raises(ValueError):
        ledger(2, 1.0, assumed_N_d=0.0)
    with pytest.raises(ValueError):
        ledger(2, math.inf)
    with pytest.raises(InfeasibleLedger):
        choose_kn(2, 1e9, k_cap=1000)


# ---------------------------------------------------------------- checkers


def test_elliptic_occupation_against_oracle():
    r = check_elliptic_aleksandrov(BM, HALF, config=CFG)
    assert r.verdict == "holds"
    # det(a)^(1/2) = 1/2 times the ball occupation
    assert r.lhs["ci_low"] - 0.005 <= 0.29829 / 2 <= r.lhs["ci_high"] + 0.005
    assert r.rhs == pytest.approx(0.5 * math.sqrt(math.pi / 4))
    json.dumps(r.as_dict())


def test_zero_source_gives_zero_occupation():
    r = check_elliptic_aleksandrov(BM, ScalarField.zero(2), config=CFG)
    assert r.lhs["mean"] == 0.0 and r.verdict == "holds" and r.fitted == 0.0


def test_undersized_constant_is_flagged():
    r = check_elliptic_aleksandrov(BM, HALF, config=CFG, assumed_N_d=0.01)
    assert r.verdict == "violated-beyond-CI"
    assert r.lhs["ci_low"] > r.rhs


def test_start_outside_ball_rejected():
    with pytest.raises(ValueError):
        check_elliptic_aleksandrov(BM, HALF, x=(1.5, 0.0), config=CFG)


def test_occupation_scaling():
    r = check_aleksandrov_scaling(BM, HALF, config=CFG)
    assert r.verdict == "holds"
    assert abs(r.details["difference"]) <= r.details["joint_halfwidth"]


def test_psi_moments_match_exact_first_moment():
    r = check_psi_moments(BM, config=CFG)
    assert r.verdict == "holds"
    assert r.fitted == pytest.approx(0.25, abs=0.02)


def test_psi_tail_rate_is_stable_across_radii():
    r = check_psi_exp_tail(BM, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], config=CFG)
    assert r.verdict == "holds" and r.details["stable"]
    # psi = tau / 2 and P(tau > s) ~ exp(-j0^2 s / 2), so the rate is j0^2
    assert r.fitted == pytest.approx(2.404825557695773**2, rel=0.15)


def test_exit_lower_tail():
    r = check_exit_lower_tail(BM, [0.02, 0.04, 0.07, 0.1, 0.15, 0.2], config=CFG.replace(n_paths=10000),
                              laplace_paths=500, ledger_radius_check=False)
    assert r.verdict == "holds"
    # phi = tau here, and P(tau <= t) decays like exp(-1 / (2t))
    assert r.fitted == pytest.approx(0.5, abs=0.05)
    assert r.fitted > r.details["ledger_beta"]


def test_exit_lower_tail_rejects_kappa():
    with pytest.raises(ValueError):
        check_exit_lower_tail(BM, [0.1], kappa=1.0, config=CFG)


def test_hitting_nested_family():
    fam = [TargetSet.ball(0.1, (0.5, 0.0)), TargetSet.ball(0.25, (0.5, 0.0))]
    r = check_hitting(BM, fam, 0.01, config=CFG)
    assert r.verdict == "holds" and r.details["monotone"]
    with pytest.raises(ValueError):
        check_hitting(BM, fam, [0.01], config=CFG)


def test_lower_occupation():
    r = check_lower_occupation(BM, config=CFG)
    assert r.verdict == "holds" and r.details["stable"]


def test_discounted_global_exponent():
    r = check_discounted_whole_space(BM, HALF, 2, [1, 4, 16], config=CFG.replace(n_paths=1000))
    assert r.verdict == "holds"
    assert r.details["exponent"] == pytest.approx(-0.5, abs=0.1)


def test_discounted_rejects_unknown_variant():
    with pytest.raises(ValueError):
        check_discounted_whole_space(BM, HALF, 2, [1, 4], variant="nope", config=CFG)


def test_counterexample_sweep_reports_norm_variation():
    r = counterexample_sweep((0.1, 0.05), config=CFG.replace(n_paths=500, step_kappa=0.2))
    assert r.details["mc_agrees"] and r.details["increasing"]
    # the L_{3/2} norm of the drift moves with eps, so the sweep cannot certify boundedness
    assert not r.details["norm_checks"]["1.5"]["ok"]
    assert r.details["norm_checks"]["2.0"]["ok"]
    assert r.verdict == "inconclusive"
    with pytest.raises(ValueError):
        counterexample_sweep((0.01, 0.1), config=CFG)


def test_counterexample_sweep_accepts_tiny_path_budgets():
    # fewer paths than the configured batch count
    r = counterexample_sweep((0.1, 0.05), config=CFG.replace(step_kappa=0.2), paths=(40, 4))
    assert [row[0] for row in r.tables["counterexample"]["rows"]] == [0.1, 0.05]


# ------------------------------------------------------------------ report


def test_report_rejects_unknown_verdict():
    with pytest.raises(ValueError):
        EstimateReport("x", "", None, None, "", None, "maybe")


def test_report_serializes_non_finite_values():
    r = EstimateReport("x", "", {"mean": math.nan}, math.inf, "", np.float64(1.0), "holds",
                       details={"a": np.arange(3), "b": np.bool_(True)})
    d = r.as_dict()
    assert d["lhs"]["mean"] == "nan" and d["rhs"] == "inf"
    assert d["details"]["a"] == [0, 1, 2] and d["details"]["b"] is True
    json.dumps(d)


def test_battery_fitted_constant_picks_largest():
    reps = [EstimateReport("check_elliptic_aleksandrov", "", None, None, "", v, "holds",
                           metadata={"scenario": s}) for v, s in ((0.1, "a"), (0.3, "b"), (0.2, "c"))]
    assert battery_fitted_N(reps) == (0.3, "b")
    assert battery_fitted_N(reps, "other") == (None, None)


def test_linear_fit_edge_cases():
    assert math.isnan(linear_fit([1.0], [2.0]).slope)
    f = linear_fit([0.0, 1.0], [1.0, 3.0])
    assert f.slope == 2.0 and f.intercept == 1.0
    g = linear_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert g.slope == pytest.approx(2.0) and g.r2 == pytest.approx(1.0)
