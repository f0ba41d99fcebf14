import math

import numpy as np
import pytest

from ldlab import catalog as cat
from ldlab.model import (Domain, DriftEnvelope, ProcessModel, ScalarField, WeightFunction, ball_volume,
                         check_assumption, lp_norm, sample_grid)


def disk(R=1.0):
    return Domain.ball(R, 2)


# ---------------------------------------------------------------- lp_norm


def test_norm_of_constant_on_unit_disk():
    assert lp_norm(ScalarField.constant(2), disk(), 2) == pytest.approx(math.sqrt(math.pi), rel=1e-10)


def test_norm_of_inverse_square_root_singularity():
    # (int_{B_1} |x|^-1 dx)^(1/2) = sqrt(2 pi)
    f = ScalarField.power(2, 1.0, 0.5, 0.0, 1.0)
    assert lp_norm(f, disk(), 2) == pytest.approx(math.sqrt(2 * math.pi), rel=1e-8)


@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-3])
def test_counterexample_drift_norms(eps):
    mag = ScalarField.power(2, 1.0, 1.0, eps, 1.0)
    # p = 3/2: 2 pi * 2 (1 - sqrt(eps)), bounded as eps -> 0
    v = lp_norm(mag, disk(), 1.5) ** 1.5
    assert v == pytest.approx(4 * math.pi * (1 - math.sqrt(eps)), rel=1e-8)
    assert v <= 4 * math.pi
    # p = 2: 2 pi ln(1/eps), unbounded
    assert lp_norm(mag, disk(), 2) ** 2 == pytest.approx(2 * math.pi * math.log(1 / eps), rel=1e-8)


def test_non_integrable_singularity_has_infinite_norm():
    f = ScalarField.power(2, 1.0, 1.0, 0.0, 1.0)
    assert lp_norm(f, disk(), 2) == math.inf
    assert lp_norm(f, disk(), 1.5) == pytest.approx(math.sqrt(4 * math.pi) ** (4 / 3), rel=1e-8)
    # singularity outside the domain
    g = ScalarField.power(2, 1.0, 1.0, 0.0, 1.0, center=(3.0, 0.0))
    assert math.isfinite(lp_norm(g, disk(), 2))


def test_off_center_field_uses_grid_quadrature():
    f = ScalarField.indicator_ball(2, 0.3, center=(0.2, 0.1))
    val = lp_norm(f, disk(), 2, detail=True)
    assert val.method != "radial"
    assert val.value == pytest.approx(math.sqrt(math.pi * 0.09), rel=2e-3)


def test_norm_rejections():
    with pytest.raises(ValueError):
        lp_norm(ScalarField.constant(2), Domain.whole(2), 2)
    with pytest.raises(ValueError):
        lp_norm(ScalarField.constant(2), disk(), math.inf)
    with pytest.raises(ValueError):
        lp_norm(ScalarField.constant(2), disk(), 0.5)


def test_weighted_whole_space_norm():
    # int exp(-2|x|) over R^2 = 2 pi / 4
    w = WeightFunction("psi", lam=1.0, mu=1.0)
    v = lp_norm(ScalarField.constant(2), Domain.whole(2), 2, weight=w)
    assert v == pytest.approx(math.sqrt(math.pi / 2), rel=1e-8)


def test_space_time_norm_of_cylinder_indicator():
    f = ScalarField.indicator_ball(2, 0.5).windowed(0.0, 2.0)
    v = lp_norm(f, disk(), 3)
    assert v == pytest.approx((2.0 * math.pi * 0.25) ** (1 / 3), rel=1e-8)


def test_weight_function_invariants():
    psi = WeightFunction("psi", lam=4.0, mu=0.7)
    assert psi(np.zeros(2))[0] == 1.0
    psr = WeightFunction("psi_R", lam=4.0, mu=0.7, R=1.0, R0=2.0)
    r_flat = 1.0 + 2.0 / 2.0
    assert np.all(psr.radial(np.linspace(0, r_flat, 7)) == 1.0)
    assert psr.radial(r_flat + 0.5) > 1.0
    phi = WeightFunction("phi", lam=4.0, mu=0.7)
    r = np.linspace(0, 5, 11)
    assert np.all(phi.radial(r, 0.0) <= 1.0)
    assert np.all(phi.radial(r, 3.0) <= 1.0)
    with pytest.raises(ValueError):
        WeightFunction("psi", lam=0.0)


# -------------------------------------------------------- check_assumption


def test_assumption_standard_model_passes_with_zero_margin():
    rep = check_assumption(cat.catalog("standard-bm"), sample_grid(2))
    assert rep.passed and rep.margin == 0.0


def test_assumption_counterexample_passes():
    m = cat.catalog("counterexample-ε", eps=0.1)
    rep = check_assumption(m, sample_grid(2, 1.2, 61))
    assert rep.passed
    # equality holds on the shell: |b| = env * det(a)^(1/2)
    x = np.array([[0.5, 0.0]])
    b = np.linalg.norm(m.drift(0.0, x), axis=1)
    assert b[0] == pytest.approx(m.envelope(x)[0] * 0.5, rel=1e-12)


def test_assumption_constant_drift_with_zero_envelope_fails():
    m = ProcessModel.constant(np.eye(2), drift=np.array([1.0, 0.0]))
    rep = check_assumption(m, sample_grid(2, 1.0, 5))
    assert not rep.passed
    assert rep.margin == pytest.approx(1.0)


def test_assumption_reports_non_psd_diffusion():
    # a = sigma sigma^T / 2 is PSD for any sigma, so corrupt the evaluator
    m = cat.catalog("standard-bm")

    class Broken:
        d = 2
        ellipticity = None

        def diffusion(self, t, x):
            a = m.diffusion(t, x).copy()
            a[:, 0, 0] = -1.0
            return a

        def drift(self, t, x):
            return m.drift(t, x)

        def envelope(self, x):
            return m.envelope(x)

    rep = check_assumption(Broken(), sample_grid(2, 1.0, 3))
    assert not rep.passed and rep.defects


# ----------------------------------------------------------------- catalog


def test_catalog_standard_bm():
    m = cat.catalog("standard-bm")
    a = m.diffusion(0.0, np.zeros((1, 2)))[0]
    np.testing.assert_allclose(a, 0.5 * np.eye(2))
    assert m.ellipticity == 0.5
    np.testing.assert_array_equal(m.drift(0.0, np.ones((1, 2))), 0.0)


def test_catalog_counterexample_drift():
    m = cat.catalog("counterexample-ε", eps=0.1)
    x = np.array([[0.3, 0.4], [0.05, 0.0], [1.2, 0.0]])
    b = m.drift(0.0, x)
    np.testing.assert_allclose(b[0], -x[0] / 0.25, rtol=1e-12)
    np.testing.assert_array_equal(b[1:], 0.0)


def test_catalog_singular_envelope_norm():
    m = cat.catalog("singular-drift-α")
    assert m.envelope.norm_Ld == pytest.approx(2 * math.sqrt(2 * math.pi), rel=1e-12)
    x = np.array([[0.25, 0.0]])
    assert m.envelope(x)[0] == pytest.approx(2 * 0.25**-0.5)
    # the quadrature route agrees with the closed form
    assert lp_norm(m.envelope.as_field(), disk(), 2) == pytest.approx(m.envelope.norm_Ld, rel=1e-8)


def test_catalog_unknown_name_lists_valid_names():
    with pytest.raises(cat.UnknownScenario) as err:
        cat.catalog("foo")
    assert "standard-bm" in str(err.value) and "counterexample-ε" in str(err.value)


def test_catalog_aliases_and_overrides():
    assert cat.canonical_name("singular-drift-alpha") == "singular-drift-α"
    with pytest.raises(ValueError):
        cat.catalog("standard-bm", bogus=1)


@pytest.mark.parametrize("name", cat.scenario_names())
def test_every_catalog_model_satisfies_its_assumptions(name):
    m = cat.catalog(name)
    rep = check_assumption(m, sample_grid(m.d, 2.0, 41))
    assert rep.passed and rep.ellipticity_ok
    a = m.diffusion(0.0, sample_grid(m.d, 2.0, 21))
    det = np.clip(np.linalg.det(a), 0, None) ** (1 / m.d)
    tr = np.trace(a, axis1=1, axis2=2)
    assert np.all(det <= tr / m.d + 1e-12)
    if m.ellipticity is not None:
        dl = m.ellipticity
        assert np.all(det >= dl - 1e-12) and np.all(det <= 1 / dl + 1e-12)
        assert np.all(tr >= m.d * dl - 1e-12) and np.all(tr <= m.d / dl + 1e-12)


def test_matrix_amgm_equality_only_for_scalar_matrices():
    pts = sample_grid(2, 1.0, 5)
    for name, equal in (("isotropic-scaled", True), ("anisotropic-Sδ", False)):
        a = cat.catalog(name).diffusion(0.0, pts)
        gap = np.trace(a, axis1=1, axis2=2) / 2 - np.linalg.det(a) ** 0.5
        assert np.all(np.abs(gap) < 1e-12) == equal


def test_envelope_rejects_bad_data():
    with pytest.raises(ValueError):
        DriftEnvelope(2, norm_Ld=math.inf)
    with pytest.raises(ValueError):
        ProcessModel.constant(np.eye(2), ellipticity=1.5)


def test_ball_volume():
    assert ball_volume(2) == pytest.approx(math.pi)
    assert ball_volume(3, 2.0) == pytest.approx(4 / 3 * math.pi * 8)
