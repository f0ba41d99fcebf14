import io

import numpy as np
import pytest

from ldlab import catalog as cat
from ldlab.engine import (FunctionalSpec, Hitting, MaxDisplacement, Occupation, Phi, PhiOutside, Psi,
                          SimConfig, TargetSet, bias_order, pathwise_audit, run_ensemble, simulate_path,
                          summarize)
from ldlab.model import Domain, ProcessModel, ScalarField

DISK = Domain.ball(1.0, 2)
ALL = FunctionalSpec.of(Psi(), Phi(), PhiOutside(0.5), MaxDisplacement(),
                        Occupation(ScalarField.indicator_ball(2, 0.5), "one"))


@pytest.fixture(scope="module")
def bm_run():
    cfg = SimConfig(time_step_h=2e-3, n_paths=2000, batch_count=20, master_seed=7)
    return run_ensemble(cat.catalog("standard-bm"), DISK, ALL, cfg)


def within(est, value, slack=0.0):
    return est.ci_low - slack <= value <= est.ci_high + slack


def test_brownian_exit_functionals(bm_run):
    # a = I/2: E tau = 1/2, psi = tau/2, phi = tau
    assert within(bm_run.estimate("tau"), 0.5, 0.005)
    assert within(bm_run.estimate("psi"), 0.25, 0.003)
    assert within(bm_run.estimate("phi"), 0.5, 0.005)
    assert within(bm_run.estimate("occ[one,none]"), 0.29829, 0.005)
    assert bm_run.count("exited") == bm_run.n_paths


def test_pathwise_identities(bm_run):
    s = bm_run.samples
    np.testing.assert_allclose(s["psi"], s["phi"] / 2, rtol=1e-12)
    assert np.all(s["phi_out"] <= s["phi"] + 1e-12)
    assert np.all(s["occ[one,none]"] <= s["tau"] + 1e-12)
    # exit positions sit on the boundary after the bridge correction
    np.testing.assert_allclose(np.linalg.norm(bm_run.exit_position, axis=1), 1.0, atol=0.2)


def test_zero_diffusion_is_censored():
    m = ProcessModel.constant(np.zeros((2, 2)))
    st = run_ensemble(m, DISK, FunctionalSpec(), SimConfig(max_time=1.0, n_paths=40, batch_count=4))
    assert st.count("censored") == 40
    assert st.censored_fraction == 1.0


def test_results_do_not_depend_on_worker_count(bm_run):
    st = run_ensemble(cat.catalog("standard-bm"), DISK, ALL, bm_run.config, workers=3)
    for k in bm_run.keys:
        np.testing.assert_array_equal(bm_run.samples[k], st.samples[k])
    np.testing.assert_array_equal(bm_run.status, st.status)


def test_single_path_matches_ensemble_entry(bm_run):
    for i in (0, 123, 1999):
        p = simulate_path(cat.catalog("standard-bm"), DISK, ALL, bm_run.config, i)
        q = bm_run.path(i)
        assert p.exit_time == q.exit_time and p.steps == q.steps
        assert p.values == q.values


def test_path_offset_shifts_the_streams(bm_run):
    cfg = bm_run.config.replace(path_offset=1000, n_paths=1000)
    st = run_ensemble(cat.catalog("standard-bm"), DISK, FunctionalSpec(), cfg)
    np.testing.assert_array_equal(st.samples["tau"], bm_run.samples["tau"][1000:])


def test_confidence_interval_shrinks_like_inverse_sqrt_n():
    x = np.random.default_rng(0).exponential(size=40000)
    a = summarize(x[:10000]).halfwidth
    b = summarize(x).halfwidth
    assert a / b == pytest.approx(2.0, rel=0.05)
    e = summarize(x[:1000])
    assert e.ci_low < e.mean < e.ci_high and e.batch_ci_halfwidth > 0


def test_summarize_empty():
    e = summarize([])
    assert e.n == 0 and np.isnan(e.mean)


def test_bias_order_without_exit_correction():
    cfg = SimConfig(time_step_h=2e-3, n_paths=4000, master_seed=7, exit_correction="none")
    b = bias_order(cat.catalog("standard-bm"), DISK, "tau", cfg, [1.6e-2, 8e-3, 4e-3, 2e-3])
    assert b.verdict == "ok"
    # overshoot bias of the discrete monitor is of order sqrt(h)
    assert 0.25 < b.order < 0.9
    assert all(e > 0.5 for e in b.estimates)
    assert b.estimates == sorted(b.estimates, reverse=True)


def test_bridge_correction_removes_overshoot_bias():
    cfg = SimConfig(time_step_h=8e-3, n_paths=4000, master_seed=7)
    est = run_ensemble(cat.catalog("standard-bm"), DISK, FunctionalSpec(), cfg).estimate("tau")
    assert within(est, 0.5, 0.005)


def test_bias_order_rejects_bad_grids():
    cfg = SimConfig(n_paths=40, batch_count=4)
    m = cat.catalog("standard-bm")
    with pytest.raises(ValueError):
        bias_order(m, DISK, "tau", cfg, [4e-3, 2e-3])
    with pytest.raises(ValueError):
        bias_order(m, DISK, "tau", cfg, [9e-3, 3e-3, 2e-3])


def test_occupation_is_additive_over_disjoint_pieces():
    cfg = SimConfig(time_step_h=2e-3, n_paths=600, batch_count=20, master_seed=3)
    m = cat.catalog("standard-bm")
    pieces = [ScalarField.indicator_ball(2, 0.4), ScalarField.indicator_shell(2, 0.4, 1.0),
              ScalarField.constant(2)]
    vals = [run_ensemble(m, DISK, FunctionalSpec.of(Occupation(f, "one")), cfg).samples["occ[one,none]"]
            for f in pieces]
    np.testing.assert_allclose(vals[0] + vals[1], vals[2], atol=3 * cfg.time_step_h)


def test_hitting_probability_of_a_disk():
    cfg = SimConfig(time_step_h=1e-3, n_paths=3000, master_seed=11)
    fs = FunctionalSpec.of(Hitting(TargetSet.ball(0.25, (0.5, 0.0))))
    st = run_ensemble(cat.catalog("standard-bm"), DISK, fs, cfg)
    key = fs.keys()[-1]
    assert within(st.estimate(key), 0.56545, 0.01)


def test_pathwise_audit_collects_runs(bm_run):
    with pathwise_audit() as rec:
        run_ensemble(cat.catalog("standard-bm"), DISK, FunctionalSpec(), bm_run.config.replace(n_paths=200))
        run_ensemble(cat.catalog("anisotropic-Sδ"), DISK, FunctionalSpec(), bm_run.config.replace(n_paths=200))
    assert rec.runs == 2 and rec.paths == 400
    assert rec.violations == 0
    assert rec.isotropic_runs == 1 and rec.isotropic_gap < 1e-9
    # audit is detached after the block
    run_ensemble(cat.catalog("standard-bm"), DISK, FunctionalSpec(), bm_run.config.replace(n_paths=40))
    assert rec.runs == 2


def test_dump_format(bm_run):
    buf = io.StringIO()
    bm_run.dump(buf, columns=["tau"])
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("# path seed status")
    assert len(lines) == bm_run.n_paths + 1
    first = lines[1].split()
    assert first[0] == "0" and first[1] == "7" and float(first[-1]) == bm_run.samples["tau"][0]


@pytest.mark.parametrize("kw", [dict(time_step_h=0.0), dict(time_step_h=100.0), dict(exit_correction="x"),
                                dict(drift_clip_length=0.0), dict(n_paths=10, batch_count=20),
                                dict(noise_substeps=0), dict(master_seed=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_functional_spec_validation():
    with pytest.raises(ValueError):
        Occupation(ScalarField.constant(2), density="bogus")
    with pytest.raises(ValueError):
        FunctionalSpec.of(PhiOutside(0.1), PhiOutside(0.2))
    with pytest.raises(ValueError):
        FunctionalSpec.of(Occupation(ScalarField.constant(2), discount="phi", lam=1.0),
                          Occupation(ScalarField.constant(2), discount="t", lam=2.0))
    assert FunctionalSpec.of(Psi(), Psi()).keys() == ["tau", "psi", "phi"]
