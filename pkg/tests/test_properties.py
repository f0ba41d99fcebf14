"""Invariants checked on random inputs."""

import math

import numpy as np
from hypothesis import given, strategies as st

from ldlab import oracles as orc
from ldlab.barrier import kernel_mass, phi_inverse
from ldlab.engine import summarize
from ldlab.ledger import ledger
from ldlab.model import Domain, ScalarField, lp_norm
from ldlab.rng import split_seed

pos = st.floats(0.05, 5.0, allow_nan=False)
radius = st.floats(0.05, 0.95)
p_exp = st.floats(2.0, 6.0)


@given(c=pos, r=radius, p=p_exp)
def test_norm_is_homogeneous(c, r, p):
    f = ScalarField.indicator_ball(2, r)
    D = Domain.ball(1.0, 2)
    assert math.isclose(lp_norm(f.scaled(c), D, p), c * lp_norm(f, D, p), rel_tol=1e-9)


@given(s=st.floats(0.2, 5.0), r=radius, p=p_exp, alpha=st.floats(0.0, 0.9))
def test_norm_scale_covariance(s, r, p, alpha):
    # ||f(./s)||_{L_p(B_s)} = s^(d/p) ||f||_{L_p(B_1)} in d = 2
    f = ScalarField.power(2, 1.0, alpha, 0.0, r) + ScalarField.indicator_ball(2, r / 2)
    lhs = lp_norm(f.dilated(s), Domain.ball(s, 2), p)
    rhs = s ** (2 / p) * lp_norm(f, Domain.ball(1.0, 2), p)
    if alpha * p >= 2:
        assert lhs == rhs == math.inf
    else:
        assert math.isclose(lhs, rhs, rel_tol=1e-6)


@given(a=st.floats(0.0, 3.0), b=st.floats(0.0, 3.0), d=st.sampled_from([2, 3]))
def test_ledger_is_monotone_in_the_drift_norm(a, b, d):
    lo, hi = sorted((a, b))
    La, Lb = ledger(d, lo), ledger(d, hi)
    assert La.N_db <= Lb.N_db
    assert La.n <= Lb.n
    assert La.R <= Lb.R and La.beta >= Lb.beta
    assert Lb.beta == math.log(2) ** 2 / (4 * Lb.R**2)


@given(Nd=st.floats(0.1, 4.0), B=st.floats(0.0, 2.0))
def test_ledger_constant_grows_with_assumed_N(Nd, B):
    assert ledger(2, B, Nd).N_db <= ledger(2, B, 1.1 * Nd).N_db


@given(rho=st.floats(1e-3, 50.0), d=st.sampled_from([2, 3]))
def test_weighted_kernel_below_flat(rho, d):
    w, f = kernel_mass(rho, 1, d), kernel_mass(rho, 0, d)
    assert 0 < w <= f
    assert kernel_mass(1.01 * rho, 1, d) > w


@given(t=st.floats(1e-4, 100.0), theta=st.sampled_from([0, 1]))
def test_phi_inverse_is_increasing(t, theta):
    assert phi_inverse(t, theta) < phi_inverse(1.5 * t, theta)


@given(x=st.lists(st.floats(-10, 10), min_size=40, max_size=200), a=st.floats(0.1, 10.0), b=st.floats(-5, 5))
def test_summary_is_affine_equivariant(x, a, b):
    x = np.array(x)
    e0 = summarize(x)
    e1 = summarize(a * x + b)
    assert e0.ci_low <= e0.mean <= e0.ci_high
    assert math.isclose(e1.mean, a * e0.mean + b, rel_tol=1e-9, abs_tol=1e-9)
    assert math.isclose(e1.halfwidth, a * e0.halfwidth, rel_tol=1e-9, abs_tol=1e-9)


@given(seed=st.integers(0, 2**64 - 1))
def test_seed_split_roundtrip(seed):
    k0, k1 = split_seed(seed)
    assert int(k0) | (int(k1) << 32) == seed


@given(cx=st.floats(0.2, 0.7), rho=st.floats(0.05, 0.25), x=st.floats(-0.5, 0.5))
def test_hitting_probability_monotone_in_target(cx, rho, x):
    # target well inside the disk and away from the start
    if abs(cx - x) <= rho + 0.05 or cx + 1.2 * rho >= 1:
        return
    p1 = orc.hit_probability_disk((cx, 0.0), rho, (x, 0.0))
    p2 = orc.hit_probability_disk((cx, 0.0), 1.2 * rho, (x, 0.0))
    assert 0 < p1 < p2 < 1


@given(r=st.floats(0.05, 1.0), x=st.floats(0.0, 0.99))
def test_ball_occupation_below_exit_time(r, x):
    occ = orc.ball_occupation(r, x=[x, 0.0])
    assert 0 <= occ <= orc.exit_time_ball(1.0, x=[x, 0.0]) + 1e-15


@given(n=st.integers(1, 6))
def test_psi_moments_satisfy_jensen(n):
    m = orc.psi_moments_ball(n)
    assert all(m[k - 1] >= m[0] ** k for k in range(1, n + 1))
    # factorial growth bound of the moment generating argument
    assert all(m[k - 1] <= math.factorial(k) * m[0] ** k * 2**k for k in range(1, n + 1))
