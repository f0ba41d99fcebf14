import math
from fractions import Fraction

import numpy as np
import pytest

from ldlab import oracles as orc

J0 = 2.404825557695773  # first zero of the Bessel function J_0


def test_exit_time_ito_identity():
    assert orc.exit_time_ball(1.0) == 0.5
    assert orc.exit_time_ball(2.0, x=[1.0, 0.0]) == pytest.approx(1.5)
    assert orc.exit_time_ball(1.0, d=3) == pytest.approx(1 / 3)


def test_ball_occupation_closed_form():
    assert orc.ball_occupation(0.5) == pytest.approx(1 / 8 + math.log(2) / 4, rel=1e-14)
    assert orc.ball_occupation(0.5) == pytest.approx(0.29829, abs=1e-5)
    # full ball reduces to the exit time
    assert orc.ball_occupation(1.0) == pytest.approx(0.5)


@pytest.mark.parametrize("x", [0.0, 0.3, 0.7])
def test_ball_occupation_two_routes(x):
    r, u = orc.radial_fd_solve(2, 1.0, lambda s: (s < 0.5).astype(float) if np.ndim(s) else float(s < 0.5),
                               n=4000, breaks=(0.5,))
    fd = float(np.interp(x, r, u))
    assert fd == pytest.approx(orc.ball_occupation(0.5, x=[x, 0.0]), rel=5e-4)


@pytest.mark.parametrize("eps", [0.5, 0.1, 0.01])
def test_counterexample_two_routes(eps):
    assert orc.counterexample_oracle(eps) == pytest.approx(orc.counterexample_closed_form(eps), rel=5e-4)


def test_counterexample_without_drift():
    # eps = 1: no drift, value E tau / 2 = 1/4
    assert orc.counterexample_closed_form(1.0) == pytest.approx(0.25)
    assert orc.counterexample_oracle(1.0) == pytest.approx(0.25, rel=1e-4)


def test_counterexample_grows_like_half_log():
    vals = [orc.counterexample_oracle(e) for e in (1e-1, 1e-2, 1e-3)]
    assert vals[0] < vals[1] < vals[2]
    assert vals[2] / vals[0] > 1.5
    assert vals[2] - vals[1] == pytest.approx(0.5 * math.log(10), rel=1e-2)


def test_psi_moments_exact_and_fd():
    exact = orc.psi_moments_ball(3)
    assert exact[0] == Fraction(1, 4)
    fd = orc.psi_moment_fd(3)
    for e, v in zip(exact, fd):
        assert v == pytest.approx(float(e), rel=1e-4)


def test_psi_moments_scale_like_R_to_2n():
    m1 = orc.psi_moments_ball(3, R=1)
    m2 = orc.psi_moments_ball(3, R=2)
    for n, (a, b) in enumerate(zip(m1, m2), start=1):
        assert b == a * 4**n


def test_dirichlet_and_psi_tail_rates():
    assert orc.dirichlet_rate() == pytest.approx(J0**2 / 2, rel=1e-12)
    assert orc.psi_tail_rate() == pytest.approx(J0**2, rel=1e-12)
    assert orc.psi_tail_rate() == pytest.approx(5.78, abs=0.01)
    assert orc.dirichlet_rate(R=2.0) == pytest.approx(J0**2 / 8, rel=1e-12)


@pytest.mark.parametrize("c,rho", [((0.4, 0.0), 0.5), ((0.5, 0.0), 0.25), ((0.0, 0.3), 0.2)])
def test_hitting_disk_two_routes(c, rho):
    exact = orc.hit_probability_disk(c, rho, (0.0, 0.0)) if np.hypot(*c) > rho else 1.0
    fd = orc.hit_probability_fd([(c, rho)], (0.0, 0.0), hg=1 / 160)
    assert fd == pytest.approx(exact, abs=5e-3)


def test_hitting_disk_exact_values():
    assert orc.hit_probability_disk((0.5, 0.0), 0.25, (0.0, 0.0)) == pytest.approx(0.56545, abs=1e-5)
    # centered disk: log-harmonic measure
    assert orc.hit_probability_disk((0.0, 0.0), 0.25, (0.5, 0.0)) == pytest.approx(
        math.log(0.5) / math.log(0.25), rel=1e-10)
    assert orc.hit_probability_disk((0.5, 0.0), 0.25, (0.6, 0.0)) == 1.0


def test_doob_bracket():
    lo, hi = orc.doob_bracket(1.0, 1.0)
    assert (lo, hi) == (2.0, 8.0)


def test_reflection_bound_is_monotone_and_small_at_short_times():
    vals = [orc.reflection_exit_bound(s, 1.0) for s in (0.0, 0.01, 0.05, 0.2)]
    assert vals[0] == 0.0
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[1] < 1e-10


def test_phi_forward_closed_forms():
    assert orc.phi_forward(1.0, 0) == pytest.approx(math.pi)
    assert orc.phi_forward(1.0, 1) == pytest.approx(2 * math.pi * (math.log(2) - 0.5))


def test_radial_monge_ampere_quadratic():
    # f = 1 everywhere: mu(B_s) = pi s^2, slope s, z = (r^2 - 16)/2
    r = np.array([0.0, 1.0, 2.5])
    z = orc.radial_monge_ampere(r, lambda s: math.pi * s * s)
    np.testing.assert_allclose(z, 0.5 * (r * r - 16), rtol=1e-9)


def test_radial_monge_ampere_weighted_kernel_is_deeper():
    mass = lambda s: math.pi * min(s, 1.0) ** 2
    z0 = orc.radial_monge_ampere([0.0], mass, theta=0)[0]
    z1 = orc.radial_monge_ampere([0.0], mass, theta=1)[0]
    assert z1 < z0 < 0
