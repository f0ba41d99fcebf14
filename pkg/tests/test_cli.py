import json

import pytest

from ldlab import __version__, cli


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


SMALL = """\
sim: {{n_paths: 200, time_step_h: 2e-3, master_seed: 5}}
output_dir: {out}
checkers:
  - checker: check_psi_moments
    scenario: standard-bm
    params: {{n_max: 1}}
"""


def test_version(capsys):
    assert cli.main(["version"]) == 0
    assert capsys.readouterr().out.strip() == __version__


def test_list_scenarios(capsys):
    assert cli.main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    for name in ("standard-bm", "counterexample-ε", "singular-drift-α"):
        assert name in out


def test_describe_checker(capsys):
    assert cli.main(["describe-checker", "check_psi_moments"]) == 0
    out = capsys.readouterr().out
    assert "n_max" in out
    assert cli.main(["describe-checker", "nope"]) == 2
    assert "check_psi_moments" in capsys.readouterr().err


def test_empty_checker_list_runs(tmp_path):
    out = tmp_path / "out"
    cfg = write(tmp_path, f"checkers: []\noutput_dir: {out}\n")
    assert cli.main(["run", cfg]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["results"] == [] and rep["format_version"] == 1


def test_unknown_scenario_is_rejected_before_running(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write(tmp_path, f"output_dir: {out}\nchecckers: []\n"
                          "checkers:\n  - checker: check_psi_moments\n    scenario: foo\n")
    assert cli.main(["run", cfg]) == 2
    err = capsys.readouterr().err
    assert "foo" in err and "standard-bm" in err
    assert "line 2" in err and "line 4" in err
    assert not (out / "report.json").exists()


def test_unknown_checker_and_parameter(tmp_path, capsys):
    cfg = write(tmp_path, "checkers:\n  - checker: check_everything\n"
                          "  - checker: check_psi_moments\n    scenario: standard-bm\n    params: {bogus: 1}\n")
    assert cli.main(["run", cfg]) == 2
    err = capsys.readouterr().err
    assert "check_everything" in err and "bogus" in err


def test_invalid_sim_settings(tmp_path):
    with pytest.raises(cli.ConfigError, match="time_step_h"):
        cli.validate_config("sim: {time_step_h: -1}\ncheckers:\n"
                            "  - checker: check_psi_moments\n    scenario: standard-bm\n")
    with pytest.raises(cli.ConfigError, match="warp"):
        cli.validate_config("sim: {warp: 9}\n")


def test_scientific_notation_is_a_float():
    cfg, jobs = cli.validate_config("sim: {time_step_h: 1e-3}\ncheckers:\n"
                                    "  - checker: check_psi_moments\n    scenario: standard-bm\n")
    assert cfg["sim"]["time_step_h"] == 1e-3
    assert jobs[0].sim.time_step_h == 1e-3


def test_run_writes_report_and_tables(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write(tmp_path, SMALL.format(out=out))
    code, rep = cli.run(cfg, workers=1, stream=None)
    assert code == 0
    res = rep["results"][0]
    assert res["status"] == "ok" and res["report"]["verdict"] == "holds"
    assert any(p.suffix == ".csv" for p in (out / "tables").iterdir())
    first = (out / "report.json").read_bytes()
    cli.run(cfg, workers=2, stream=None)
    assert (out / "report.json").read_bytes() == first


def test_violation_gives_exit_one(tmp_path):
    out = tmp_path / "out"
    cfg = write(tmp_path, f"""\
sim: {{n_paths: 400, time_step_h: 2e-3}}
output_dir: {out}
checkers:
  - checker: check_elliptic_aleksandrov
    scenario: standard-bm
    params: {{f: {{kind: indicator_ball, r: 0.5}}, assumed_N_d: 0.01}}
""")
    assert cli.main(["run", cfg]) == 1
    rep = json.loads((out / "report.json").read_text())
    assert rep["results"][0]["report"]["verdict"] == "violated-beyond-CI"


def test_field_parsing():
    f = cli.parse_field({"kind": "indicator_ball", "r": 0.5, "scale": 2.0, "t_lo": 0.0, "t_hi": 1.0}, 2)
    x = [[0.1, 0.0], [0.9, 0.0]]
    assert list(f(x, 0.5)) == [2.0, 0.0]
    assert list(f(x, 1.5)) == [0.0, 0.0]
    assert list(cli.parse_field(3.0, 2)(x)) == [3.0, 3.0]
    with pytest.raises(cli.ConfigError, match="needs parameter"):
        cli.parse_field({"kind": "indicator_ball"}, 2)
    with pytest.raises(cli.ConfigError, match="unknown field kind"):
        cli.parse_field({"kind": "spiral"}, 2)
    with pytest.raises(cli.ConfigError):
        cli.parse_field({"kind": "envelope"}, 2)


def test_target_parsing():
    ts = cli.parse_targets([{"r": 0.25, "center": [0.5, 0.0]},
                            [{"r": 0.1, "center": [0.0, 0.5]}, {"kind": "annulus", "r_in": 0.2, "r_out": 0.3}]], 2)
    assert len(ts) == 2 and len(ts[1].shapes) == 2
    with pytest.raises(cli.ConfigError):
        cli.parse_targets({"kind": "cube"}, 2)


def test_bundled_battery_validates():
    cfg, jobs = cli.load_config(cli.bundled_path())
    assert len(jobs) >= 12
    assert cli.bundled_config().startswith(open(cli.bundled_path(), encoding="utf-8").read()[:20])
