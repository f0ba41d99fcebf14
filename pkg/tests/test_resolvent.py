import math

import numpy as np
import pytest

from ldlab import catalog as cat
from ldlab.engine import SimConfig
from ldlab.model import ProcessModel, ScalarField
from ldlab.resolvent import (ResolventProblem, check_elliptic_resolvent, check_parabolic_resolvent,
                             evaluation_points, feynman_kac_u, resolvent_on_grid, rotation_invariant)

BM = cat.catalog("standard-bm")
ONE = ScalarField.constant(2)
CFG = SimConfig(time_step_h=2e-3, n_paths=1000, master_seed=3, discount_cutoff=1e-6)


def test_constant_source_in_whole_space():
    # u = int_0^inf exp(-lam t) dt = 1 / lam, up to the discount cutoff
    e = feynman_kac_u(ResolventProblem(BM, ONE, lam=2.0, window=1.0), (0.3, 0.0), CFG)
    assert e.mean == pytest.approx(0.5, rel=1e-5)
    assert e.std == 0.0


def test_undiscounted_ball_gives_exit_time():
    e = feynman_kac_u(ResolventProblem(BM, ONE, lam=0.0, R=1.0), (0.0, 0.0), CFG)
    assert e.ci_low - 0.005 <= 0.5 <= e.ci_high + 0.005


def test_undiscounted_occupation_of_inner_ball():
    f = ScalarField.indicator_ball(2, 0.5)
    e = feynman_kac_u(ResolventProblem(BM, f, lam=0.0, R=1.0), (0.0, 0.0), CFG.replace(n_paths=4000))
    assert e.ci_low - 0.005 <= 0.29829 <= e.ci_high + 0.005


def test_discount_decreases_u_pathwise():
    f = ScalarField.indicator_ball(2, 0.5)
    vals = [feynman_kac_u(ResolventProblem(BM, f, lam=lam, R=1.0), (0.2, 0.0), CFG).mean
            for lam in (0.0, 1.0, 4.0, 16.0)]
    assert all(v > 0 for v in vals)
    assert vals == sorted(vals, reverse=True)


def test_zero_source():
    e = feynman_kac_u(ResolventProblem(BM, ScalarField.zero(2), lam=1.0, R=1.0), (0.0, 0.0), CFG)
    assert e.mean == 0.0


def test_evaluation_points_integrate_the_ball():
    _, w = evaluation_points(2, 0.5, radial=True)
    assert w.sum() == pytest.approx(math.pi / 4, rel=1e-12)
    _, w3 = evaluation_points(3, 1.0, radial=True)
    assert w3.sum() == pytest.approx(4 * math.pi / 3, rel=1e-12)
    pts, wg = evaluation_points(2, 1.0, radial=False, grid_n=65)
    assert wg.sum() == pytest.approx(math.pi, rel=0.02)
    assert np.all(np.linalg.norm(pts, axis=1) < 1.0)


def test_rotation_invariance_detection():
    assert rotation_invariant(BM, ScalarField.indicator_ball(2, 0.5))
    assert not rotation_invariant(BM, ScalarField.indicator_ball(2, 0.5, center=(0.2, 0.0)))
    assert not rotation_invariant(cat.catalog("anisotropic-Sδ"), ONE)


def test_grid_function_on_whole_space():
    g = resolvent_on_grid(ResolventProblem(BM, ONE, lam=4.0, window=1.0), CFG.replace(n_paths=100))
    np.testing.assert_allclose(g.values, 0.25, rtol=1e-5)
    assert g.norm(2) == pytest.approx(0.25 * math.sqrt(math.pi), rel=1e-5)
    assert not g.low_precision.any()


def test_elliptic_resolvent_ratio_is_one_for_constant_source():
    r = check_elliptic_resolvent(ResolventProblem(BM, ONE, window=1.0), [1, 4, 16], CFG.replace(n_paths=200))
    assert r.verdict == "holds"
    np.testing.assert_allclose(r.details["fitted_N"], 1.0, rtol=1e-5)


def test_parabolic_exponent():
    r = check_parabolic_resolvent(ResolventProblem(BM, ONE, R=1.0, kind="parabolic"), [1, 4, 16],
                                  config=CFG.replace(n_paths=300))
    assert r.details["expected_exponent"] == pytest.approx(-2 / 3)
    assert r.details["exponents"]["0.0"] == pytest.approx(-2 / 3, abs=0.1)
    assert r.verdict == "holds"


def test_parabolic_start_time_range():
    with pytest.raises(ValueError):
        check_parabolic_resolvent(ResolventProblem(BM, ONE, R=1.0, kind="parabolic"), [1, 4], t0_grid=(0.5,),
                                  config=CFG)


@pytest.mark.parametrize("kw", [dict(kind="other", R=1.0), dict(lam=0.0, window=1.0), dict(lam=-1.0, R=1.0),
                                dict(R=0.0), dict(R=1.0, p=1.5), dict(R=1.0, kind="parabolic", p=2.0),
                                dict()])
def test_problem_validation(kw):
    with pytest.raises(ValueError):
        ResolventProblem(BM, ONE, **kw)


def test_problem_requires_ellipticity():
    with pytest.raises(ValueError):
        ResolventProblem(ProcessModel.constant(np.eye(2)), ONE, R=1.0)


def test_problem_defaults():
    pr = ResolventProblem(BM, ONE, R=2.0)
    assert pr.exponent == 2 and pr.radius == 1.0 and pr.source_radius == 2.0
    pp = ResolventProblem(BM, ONE, window=1.5, kind="parabolic")
    assert pp.exponent == 3 and pp.radius == 1.5
