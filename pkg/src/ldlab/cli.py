"""Command line runner: ``ldlab run <config.yaml>``, ``list-scenarios``, ``describe-checker``, ``version``.

A run configuration names checkers, the scenario each one uses, checker
parameters and simulation settings.  Everything is validated before the
first simulation starts; the report is JSON with sorted keys and no
timings, so equal configurations give byte-identical reports.
"""

from __future__ import annotations

import argparse
import csv
import inspect
import json
import math
import os
import re
import sys
import traceback
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from . import __version__
from . import barrier as mb
from . import catalog as cat
from . import estimate as est
from . import resolvent as rs
from .engine import SimConfig, TargetSet, default_workers
from .estimate import HOLDS, INCONCLUSIVE, VIOLATED, EstimateReport
from .ledger import ledger
from .model import ProcessModel, ScalarField

FORMAT_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` style numbers as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"""),
    list("-+0123456789"))


# ------------------------------------------------------------ parsing


def parse_field(spec, d, model: Optional[ProcessModel] = None) -> ScalarField:
    """Build a :class:`ScalarField` from a mapping such as ``{kind: indicator_ball, r: 0.5}``.

    Kinds: ``zero``, ``constant``, ``indicator_ball``, ``indicator_shell``,
    ``power`` and ``envelope`` (the scenario's drift envelope).  Optional
    ``t_lo`` / ``t_hi`` restrict the field in time and ``scale`` multiplies it.
    """
    if isinstance(spec, (int, float)):
        spec = {"kind": "constant", "amp": float(spec)}
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("a field needs a mapping with a 'kind'")
    s = dict(spec)
    kind = s.pop("kind")
    t_lo, t_hi = s.pop("t_lo", None), s.pop("t_hi", None)
    scale = s.pop("scale", None)
    center = s.pop("center", None)
    try:
        if kind == "zero":
            f = ScalarField.zero(d)
        elif kind == "constant":
            f = ScalarField.constant(d, float(s.pop("amp", 1.0)))
        elif kind == "indicator_ball":
            f = ScalarField.indicator_ball(d, float(s.pop("r")), float(s.pop("amp", 1.0)), center)
        elif kind == "indicator_shell":
            f = ScalarField.indicator_shell(d, float(s.pop("r0")), float(s.pop("r1")), float(s.pop("amp", 1.0)),
                                            center)
        elif kind == "power":
            f = ScalarField.power(d, float(s.pop("amp")), float(s.pop("alpha")), float(s.pop("r_lo", 0.0)),
                                  float(s.pop("r_hi", 1.0)), center)
        elif kind == "envelope":
            if model is None:
                raise ConfigError("field kind 'envelope' needs a scenario")
            f = model.envelope.as_field()
        else:
            raise ConfigError(f"unknown field kind {kind!r}")
    except KeyError as e:
        raise ConfigError(f"field kind {kind!r} needs parameter {e.args[0]!r}") from None
    if s:
        raise ConfigError(f"unknown field parameters {sorted(s)} for kind {kind!r}")
    if t_lo is not None or t_hi is not None:
        f = f.windowed(float(-math.inf if t_lo is None else t_lo), float(math.inf if t_hi is None else t_hi))
    if scale is not None:
        f = f.scaled(float(scale))
    return f


def _shape(spec, d):
    s = dict(spec)
    kind = s.pop("kind", "ball")
    c = s.pop("center", [0.0] * d)
    t_lo, t_hi = float(s.pop("t_lo", 0.0)), float(s.pop("t_hi", math.inf))
    if kind == "ball":
        out = TargetSet.ball(float(s.pop("r")), c, t_lo, t_hi)
    elif kind == "annulus":
        out = TargetSet.annulus(float(s.pop("r_in")), float(s.pop("r_out")), c, t_lo, t_hi)
    else:
        raise ConfigError(f"unknown target kind {kind!r}")
    if s:
        raise ConfigError(f"unknown target parameters {sorted(s)}")
    return out


def parse_targets(spec, d):
    """A list of targets; each is a shape mapping or a list of shapes (their union)."""
    if isinstance(spec, dict):
        spec = [spec]
    out = []
    for item in spec:
        parts = item if isinstance(item, list) else [item]
        tg = _shape(parts[0], d)
        for p in parts[1:]:
            tg = tg | _shape(p, d)
        out.append(tg)
    return out


# ----------------------------------------------------- barrier wrappers


def _verdict(ok):
    return HOLDS if ok else VIOLATED


def monge_ampere_calibration(h_list=(0.125, 0.0625), c=1.0, error_factor=4.0, ratio_range=(3.0, 5.0),
                             conservation_tol=1e-3) -> EstimateReport:
    """Solve with data ``c`` on all of ``B_4`` and compare with ``(c/2)(|x|^2 - 16)``."""
    rows = []
    errs = []
    ok = True
    for h in h_list:
        z = mb.solve_aleksandrov(ScalarField.constant(2, c), 0, h, calibration=True)
        exact = 0.5 * c * (np.sum(z.points**2, axis=1) - mb.RADIUS**2)
        err = float(np.max(np.abs(z.values - exact)))
        cons = mb.conservation_residual(z)
        errs.append(err)
        ok &= err <= error_factor * h * h and cons <= conservation_tol
        rows.append([h, err, err / (h * h), cons, z.info["iterations"]])
    ratios = [a / b for a, b in zip(errs[:-1], errs[1:])]
    ok &= all(ratio_range[0] <= r <= ratio_range[1] for r in ratios)
    return EstimateReport(
        "monge_ampere_calibration", "sup |z_h - (c/2)(|x|^2 - 16)| <= 4 h^2, refinement ratio in [3, 5]",
        None, None, "closed form", None, _verdict(ok), {"c": c, "h_list": list(h_list)},
        {"refinement_ratios": ratios},
        {"calibration": est._table(["h", "sup_error", "error_over_h2", "conservation", "iterations"], rows)})


def monge_ampere_barrier(f: ScalarField, theta=0, h=0.0625, eps_list=(0.25,), n_matrices=50, seed=0,
                         conservation_tol=1e-3, surfaces=None) -> EstimateReport:
    """Solve, then check mass conservation, the sup bound and the mollified subsolution inequality."""
    z = mb.solve_aleksandrov(f, theta, h)
    cons = mb.conservation_residual(z)
    b = mb.verify_bound_22(z, f, theta)
    s = mb.verify_subsolution_23(z, f, theta, mb.random_psd(n_matrices, 2, seed), eps_list)
    ok = cons <= conservation_tol and b.holds and s.holds
    if surfaces is not None:
        surfaces["z"] = z
    return EstimateReport(
        "monge_ampere_barrier", "|z| <= 8 Phi(int_{B_2} f^d); a : D^2 z_eps >= d det(a)^(1/d) (f (1 + theta |Dz|))_eps",
        None, b.rhs, "closed form", b.lhs, _verdict(ok), {"theta": theta, "h": h, "seed": seed},
        {"conservation": cons, "bound": b.as_dict(), "subsolution_worst": s.margin,
         "subsolution_location": s.details["worst_location"], "iterations": z.info["iterations"]},
        {"subsolution": est._table(s.details["columns"], s.details["rows"])})


def composite(f: ScalarField, envelope: ScalarField, N_d=1.0, h=0.0625, surfaces=None) -> EstimateReport:
    cb = mb.composite_barrier(f, envelope, N_d, h)
    if surfaces is not None:
        surfaces["z1"] = cb.z1
        if cb.z2 is not None:
            surfaces["z2"] = cb.z2
        surfaces["z"] = cb.z
    g = cb.gradient
    return EstimateReport(
        "composite_barrier", "|Dz1(x)| <= max|z1| / (4 - |x|) on B_3",
        None, g.rhs, "closed form", g.lhs, _verdict(g.holds), {"N_d": N_d, "h": h},
        {"F": cb.F, "worst_margin": g.margin, "nodes": g.details["nodes"], "worst_point": g.details["worst_point"],
         "max_z1": cb.z1.max_abs(), "max_z2": cb.z2.max_abs() if cb.z2 is not None else 0.0,
         "max_z": cb.z.max_abs()}, {})


def constant_ledger(d, norm_b, assumed_N_d=1.0, recipe="min-n", grid_points=10) -> EstimateReport:
    led = ledger(d, norm_b, assumed_N_d, recipe)
    grid = np.linspace(0.0, max(norm_b, 1.0), grid_points)
    Rs = [ledger(d, float(b), assumed_N_d, recipe).R for b in grid]
    mono = all(b >= a for a, b in zip(Rs[:-1], Rs[1:]))
    return EstimateReport(
        "constant_ledger", "explicit radius and rate constants from an assumed N_d", None, None,
        "ledger(assumed N_d)", led.R, _verdict(mono), {"recipe": recipe}, {"ledger": led.as_dict()},
        {"monotonicity": est._table(["norm_b", "R"], [[float(b), r] for b, r in zip(grid, Rs)])})


# --------------------------------------------------------------- registry


@dataclass
class Checker:
    name: str
    fn: Callable
    inequality: str
    preconditions: str
    scenario: bool = True
    field_params: tuple = ()
    monte_carlo: bool = True


def _ineq(name):
    return {
        "check_elliptic_aleksandrov": "E int_0^tau f(x_t) det(a_t)^(1/d) dt <= N R ||f||_{L_d(B_R)}",
        "check_aleksandrov_scaling": "fitted N at (R, f) equals fitted N at (cR, f(./c))",
        "check_psi_moments": "E psi_tau^n <= n! N^n R^(2n)",
        "check_psi_exp_tail": "P(psi_tau > t) <= N exp(-t / (N R^2))",
        "check_exit_lower_tail": "P(phi_tau <= t) <= N exp(-beta R^2 / t)",
        "check_max_inequality": "E sup_{s<=r<=t} |x_r - x_s|^n <= N (t - s)^(n/2)",
        "check_hitting": "P(reach Gamma before leaving B_R) >= q(gamma) > 0 when |Gamma| >= gamma |B_R|",
        "check_parabolic_aleksandrov": "E int_0^tau f(t, x_t) det(a_t)^(1/(d+1)) dt <= N R^(d/(d+1)) ||f||_{L_(d+1)}",
        "check_discounted_whole_space": "E int_0^inf e^(-lam phi_t) f(x_t) det(a_t)^(1/d) dt <= N lam^(d/(2p) - 1) ||f||_{L_p}",
        "check_lower_occupation": "E int_0^tau I_{B_eps R}(x_t) dt >= N^(-1) R^2",
        "counterexample_sweep": "E psi_tau is unbounded over drifts with bounded L_p norms, p < d",
        "check_elliptic_resolvent": "lam ||u_+||_{L_p(B_{R/2})} <= N ||(lam u - L u)_+||_{L_p(B_R)} + boundary term",
        "check_parabolic_resolvent": "||u(t0, .)||_{L_p(B_{R/2})} <= N lam^(-(p-1)/p) ||(lam u - L u)_+||_{L_p}",
    }.get(name, "")


CHECKERS = {}


def _register(c: Checker):
    CHECKERS[c.name] = c


for _name, _pre in [
    ("check_elliptic_aleksandrov", "R > 0; f >= 0 with finite L_d norm; drift dominated by the envelope"),
    ("check_aleksandrov_scaling", "scale > 0; f >= 0 with finite L_d norm"),
    ("check_psi_moments", "R > 0; n_max >= 1"),
    ("check_psi_exp_tail", "t_grid positive and increasing; R_list positive"),
    ("check_exit_lower_tail", "t_grid in (0, 1); R_list positive; 0 <= kappa < 1"),
    ("check_max_inequality", "0 <= s < t; n_grid positive integers; driftless or dominated drift"),
    ("check_hitting", "uniformly elliptic; targets inside B_R with |target| >= gamma |B_R|"),
    ("check_parabolic_aleksandrov", "R > 0; f >= 0 with finite L_(d+1) norm in space-time"),
    ("check_discounted_whole_space", "p >= d (p >= d + 1 for parabolic variants); lam_grid positive"),
    ("check_lower_occupation", "R_grid positive; 0 <= kappa < 1; eps in (0, 1]"),
]:
    _register(Checker(_name, getattr(est, _name), _ineq(_name), _pre, field_params=("f",)))
_register(Checker("counterexample_sweep", est.counterexample_sweep, _ineq("counterexample_sweep"),
                  "eps_list decreasing in (0, 1); p_list in (1, d]", scenario=False))
_register(Checker("check_elliptic_resolvent", None, _ineq("check_elliptic_resolvent"),
                  "lam_grid positive; p >= d; window for R = inf; uniformly elliptic", field_params=("f",)))
_register(Checker("check_parabolic_resolvent", None, _ineq("check_parabolic_resolvent"),
                  "lam_grid positive; p >= d + 1; t0_grid in [0, R^2/4]", field_params=("f",)))
_register(Checker("monge_ampere_calibration", monge_ampere_calibration,
                  "sup |z_h - (c/2)(|x|^2 - 16)| <= 4 h^2 and second-order refinement",
                  "h_list decreasing; c > 0", scenario=False, monte_carlo=False))
_register(Checker("monge_ampere_barrier", monge_ampere_barrier,
                  "|z| <= 8 Phi(int_{B_2} f^d) and a : D^2 z_eps >= d det(a)^(1/d) (f (1 + theta |Dz|))_eps",
                  "f supported in B_2; theta in {0, 1}; eps >= 2h", scenario=False, field_params=("f",),
                  monte_carlo=False))
_register(Checker("composite_barrier", composite, "|Dz1(x)| <= max|z1| / (4 - |x|) on B_3",
                  "f and the envelope supported in B_2", field_params=("f",), monte_carlo=False))
_register(Checker("constant_ledger", constant_ledger, "explicit constants from an assumed N_d",
                  "assumed_N_d > 0", monte_carlo=False))


def _call_params(c: Checker):
    if c.name == "check_elliptic_resolvent":
        return ["f", "R", "p", "window", "n_radial", "grid_n", "lam_grid", "spread", "scale_h"]
    if c.name == "check_parabolic_resolvent":
        return ["f", "R", "p", "window", "n_radial", "grid_n", "lam_grid", "t0_grid", "tolerance", "spread",
                "n_time", "scale_h"]
    if c.name == "constant_ledger":
        return ["assumed_N_d", "recipe", "grid_points"]
    if c.name == "composite_barrier":
        return ["f", "N_d", "h"]
    skip = {"model", "config", "workers", "surfaces"}
    return [p for p in inspect.signature(c.fn).parameters if p not in skip]


def describe_checker(name: str) -> str:
    if name not in CHECKERS:
        raise KeyError(f"unknown checker {name!r}; valid names: {', '.join(sorted(CHECKERS))}")
    c = CHECKERS[name]
    lines = [c.name, f"  verifies: {c.inequality}", f"  preconditions: {c.preconditions}",
             f"  scenario: {'required' if c.scenario else 'not used'}", "  parameters:"]
    if c.fn is not None and c.name not in ("constant_ledger", "composite_barrier"):
        sig = inspect.signature(c.fn).parameters
        for p in _call_params(c):
            dflt = sig[p].default
            lines.append(f"    {p}" + ("" if dflt is inspect._empty else f" = {dflt!r}"))
    else:
        for p in _call_params(c):
            lines.append(f"    {p}")
    if c.field_params:
        lines.append("  fields: mappings with kind in zero, constant, indicator_ball, indicator_shell, power, envelope")
    return "\n".join(lines)


# ------------------------------------------------------------ validation


@dataclass
class Job:
    index: int
    checker: Checker
    scenario: Optional[str]
    model: Optional[ProcessModel]
    params: dict
    sim: SimConfig
    echo: dict


_SIM_FIELDS = {f.name for f in fields(SimConfig)}


def _positive_list(name, v, strict=True):
    try:
        vals = [float(x) for x in v]
    except TypeError:
        raise ConfigError(f"{name} must be a list of numbers") from None
    if not vals or any((x <= 0) if strict else (x < 0) for x in vals):
        raise ConfigError(f"{name} must be a nonempty list of {'positive' if strict else 'nonnegative'} numbers")
    return vals


def _check_ranges(params: dict, name: str = ""):
    for key in ("R", "scale", "p", "h", "window", "c"):
        if key in params and params[key] is not None and not float(params[key]) > 0:
            raise ConfigError(f"{key} must be positive")
    for key in ("lam_grid", "t_grid", "R_list", "R_grid", "scales", "h_list", "eps_list"):
        if key in params:
            params[key] = _positive_list(key, params[key])
    if "t0_grid" in params:
        params["t0_grid"] = _positive_list("t0_grid", params["t0_grid"], strict=False)
    if "kappa" in params and not 0 <= float(params["kappa"]) < 1:
        raise ConfigError("kappa must lie in [0, 1)")
    if "n_max" in params and int(params["n_max"]) < 1:
        raise ConfigError("n_max must be at least 1")
    if "theta" in params and params["theta"] not in (0, 1):
        raise ConfigError("theta must be 0 or 1")
    if name == "counterexample_sweep" and any(e >= 1 for e in params.get("eps_list", [])):
        raise ConfigError("eps_list must lie in (0, 1)")
    if "t_grid" in params and any(b <= a for a, b in zip(params["t_grid"][:-1], params["t_grid"][1:])):
        raise ConfigError("t_grid must be increasing")


def _prepare(job: Job):
    """Convert parameters to objects and run the cheap precondition checks."""
    c = job.checker
    p = dict(job.params)
    d = job.model.d if job.model is not None else 2
    for fp in c.field_params:
        if fp in p:
            p[fp] = parse_field(p[fp], d, job.model)
    if "targets" in p:
        p["targets"] = parse_targets(p["targets"], d)
    _check_ranges(p, c.name)
    if c.name == "check_hitting":
        T = float(p.get("R", 1.0)) ** 2 if p.get("parabolic") else None
        gam = p.get("gammas")
        gam = [gam] * len(p["targets"]) if np.isscalar(gam) else gam
        full = mb.ball_volume(d, float(p.get("R", 1.0))) * (T if T else 1.0)
        for tg, g in zip(p["targets"], gam):
            if est.target_measure(tg, d, T) < g * full * (1 - 1e-9):
                raise ConfigError("a target is smaller than gamma times the domain measure")
    if c.name == "check_discounted_whole_space":
        if p.get("variant", "global") not in est.DISCOUNTED_VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(est.DISCOUNTED_VARIANTS)}")
    if c.name in ("check_elliptic_resolvent", "check_parabolic_resolvent"):
        kind = "elliptic" if c.name == "check_elliptic_resolvent" else "parabolic"
        R = float(p.pop("R", math.inf))
        prob_kw = {k: p.pop(k) for k in ("p", "window", "n_radial", "grid_n") if k in p}
        p["problem"] = rs.ResolventProblem(job.model, p.pop("f"), 1.0, R, kind, **prob_kw)
        if kind == "parabolic":
            rho = R if math.isfinite(R) else p["problem"].window
            if any(t > rho * rho / 4 for t in p.get("t0_grid", [0.0])):
                raise ConfigError("t0_grid must lie in [0, R^2/4]")
    if c.name == "composite_barrier":
        p["envelope"] = job.model.envelope.as_field()
    if c.name == "constant_ledger":
        p["d"] = job.model.d
        p["norm_b"] = float(job.model.envelope.norm_Ld)
        if not float(p.get("assumed_N_d", 1.0)) > 0:
            raise ConfigError("assumed_N_d must be positive")
    if c.name == "monge_ampere_barrier" and "eps_list" in p:
        h = float(p.get("h", 0.0625))
        if any(e < 2 * h or e >= 2 for e in p["eps_list"]):
            raise ConfigError("eps_list must lie in [2h, 2)")
    return p


def _line_map(text):
    """Line numbers of the checker entries and top-level keys (1-based)."""
    lines = {}
    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError:
        return lines
    if isinstance(root, yaml.MappingNode):
        for k, v in root.value:
            lines[k.value] = k.start_mark.line + 1
            if k.value == "checkers" and isinstance(v, yaml.SequenceNode):
                for i, item in enumerate(v.value):
                    lines[f"checkers[{i}]"] = item.start_mark.line + 1
    return lines


def load_config(path):
    """Parse and validate a run configuration; returns ``(config dict, jobs)``.

    Raises :class:`ConfigError` with every problem found, each prefixed by
    its location (``line N, checkers[i].field``).
    """
    text = Path(path).read_text(encoding="utf-8")
    return validate_config(text)


def validate_config(text):
    try:
        cfg = yaml.load(text, Loader=_Loader) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from None
    lines = _line_map(text)
    errors = []

    def err(where, msg):
        ln = lines.get(where.split(".")[0], None)
        errors.append(f"line {ln}, {where}: {msg}" if ln else f"{where}: {msg}")

    if not isinstance(cfg, dict):
        raise ConfigError("the configuration must be a mapping")
    known = {"format_version", "output_dir", "sim", "checkers", "description"}
    for k in set(cfg) - known:
        err(str(k), f"unknown key; expected one of {sorted(known)}")
    if cfg.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        err("format_version", f"unsupported format version (expected {FORMAT_VERSION})")
    base_sim = cfg.get("sim") or {}
    if not isinstance(base_sim, dict):
        err("sim", "must be a mapping of SimConfig fields")
        base_sim = {}
    for k in set(base_sim) - _SIM_FIELDS:
        err(f"sim.{k}", f"unknown simulation setting; expected one of {sorted(_SIM_FIELDS)}")
    jobs = []
    entries = cfg.get("checkers") or []
    if not isinstance(entries, list):
        err("checkers", "must be a list")
        entries = []
    for i, entry in enumerate(entries):
        where = f"checkers[{i}]"
        if not isinstance(entry, dict) or "checker" not in entry:
            err(where, "each entry needs a 'checker' name")
            continue
        unknown = set(entry) - {"checker", "scenario", "scenario_params", "params", "sim", "label"}
        if unknown:
            err(where, f"unknown keys {sorted(unknown)}")
        name = entry["checker"]
        if name not in CHECKERS:
            err(f"{where}.checker", f"unknown checker {name!r}; valid names: {', '.join(sorted(CHECKERS))}")
            continue
        c = CHECKERS[name]
        model = None
        scen = entry.get("scenario")
        if c.scenario:
            if scen is None:
                err(f"{where}.scenario", "this checker needs a scenario")
                continue
            try:
                model = cat.catalog(scen, **(entry.get("scenario_params") or {}))
            except cat.UnknownScenario as e:
                err(f"{where}.scenario", e.args[0])
                continue
            except (ValueError, TypeError) as e:
                err(f"{where}.scenario_params", str(e))
                continue
        params = dict(entry.get("params") or {})
        allowed = set(_call_params(c))
        bad = set(params) - allowed
        if bad:
            err(f"{where}.params", f"unknown parameters {sorted(bad)}; accepted: {sorted(allowed)}")
            continue
        sim_kw = dict(base_sim)
        sim_kw.update(entry.get("sim") or {})
        bad = set(sim_kw) - _SIM_FIELDS
        if bad:
            err(f"{where}.sim", f"unknown simulation settings {sorted(bad)}")
            continue
        try:
            sim = SimConfig(**sim_kw)
        except (ValueError, TypeError) as e:
            err(f"{where}.sim", str(e))
            continue
        job = Job(i, c, scen, model, params, sim, entry)
        try:
            _prepare(job)
        except (ConfigError, ValueError, KeyError, TypeError) as e:
            err(f"{where}.params", str(e))
            continue
        jobs.append(job)
    if errors:
        raise ConfigError("\n".join(errors))
    return cfg, jobs


# ------------------------------------------------------------------ run


def _run_job(job: Job, workers, surfaces):
    c = job.checker
    p = _prepare(job)
    if c.name == "check_elliptic_resolvent":
        prob = p.pop("problem")
        return rs.check_elliptic_resolvent(prob, p.pop("lam_grid"), job.sim, workers=workers, **p)
    if c.name == "check_parabolic_resolvent":
        prob = p.pop("problem")
        return rs.check_parabolic_resolvent(prob, p.pop("lam_grid"), p.pop("t0_grid", (0.0,)), job.sim,
                                            workers=workers, **p)
    if not c.monte_carlo:
        if c.name in ("monge_ampere_barrier", "composite_barrier"):
            p["surfaces"] = surfaces
        return c.fn(**p)
    if c.scenario:
        return c.fn(job.model, config=job.sim, workers=workers, **p)
    return c.fn(config=job.sim, workers=workers, **p)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_table(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table["columns"])
        for row in table["rows"]:
            w.writerow([_fmt(x) for x in row])


def environment():
    import numba
    import scipy
    return {"artifact_version": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "float": "ieee754-binary64"}


def run(config_path, output_dir=None, workers=None, stream=sys.stdout):
    """Validate and execute a configuration; returns ``(exit status, report dict)``."""
    cfg, jobs = load_config(config_path)
    out = Path(output_dir or cfg.get("output_dir") or "ldlab-out")
    tables = out / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    workers = workers or default_workers()
    results = []
    status = EXIT_OK
    for job in jobs:
        label = job.echo.get("label") or job.checker.name
        surfaces = {}
        rec = {"index": job.index, "checker": job.checker.name, "label": label, "scenario": job.scenario}
        try:
            rep = _run_job(job, workers, surfaces)
            d = rep.as_dict()
            rec.update(status="ok", report=d)
            if rep.verdict == VIOLATED:
                status = EXIT_FAIL
            for tname, tab in sorted(rep.tables.items()):
                _write_table(tables / f"{job.index:02d}_{label}_{tname}.csv", est._clean(tab))
            for sname, z in sorted(surfaces.items()):
                mb.export_csv(z, tables / f"{job.index:02d}_{label}_surface_{sname}.csv")
            print(f"[{job.index:02d}] {label}: {rep.verdict}", file=stream)
        except Exception as e:  # captured; remaining checkers still run
            rec.update(status="error", error=f"{type(e).__name__}: {e}",
                       traceback=traceback.format_exception_only(type(e), e)[-1].strip())
            status = EXIT_FAIL
            print(f"[{job.index:02d}] {label}: error: {e}", file=stream)
        results.append(rec)
    report = {"format_version": FORMAT_VERSION, "config": cfg, "environment": environment(), "results": results}
    body = json.dumps(est._clean(report), sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    (out / "report.json").write_text(body, encoding="utf-8")
    return status, report


def bundled_path(name="paper-battery") -> str:
    """Filesystem path of a bundled configuration."""
    return str(resources.files("ldlab").joinpath(f"data/{name}.yaml"))


def bundled_config(name="paper-battery") -> str:
    return Path(bundled_path(name)).read_text(encoding="utf-8")


def main(argv=None):
    ap = argparse.ArgumentParser(prog="ldlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run a configuration file ('paper-battery' for the bundled one)")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.add_argument("--workers", type=int, default=None, help="worker processes (default: $LDLAB_WORKERS or 1)")
    sub.add_parser("list-scenarios", help="print the scenario catalog")
    dc = sub.add_parser("describe-checker", help="print a checker's parameters and the inequality it tests")
    dc.add_argument("name")
    sub.add_parser("version")
    args = ap.parse_args(argv)
    if args.verb == "version":
        print(__version__)
        return EXIT_OK
    if args.verb == "list-scenarios":
        print(cat.describe_all())
        return EXIT_OK
    if args.verb == "describe-checker":
        try:
            print(describe_checker(args.name))
        except KeyError as e:
            print(f"error: {e.args[0]}", file=sys.stderr)
            return EXIT_INVALID
        return EXIT_OK
    path = args.config
    if path == "paper-battery" and not os.path.exists(path):
        path = bundled_path()
    try:
        status, _ = run(path, args.out, args.workers)
    except ConfigError as e:
        print(f"invalid configuration {path}:\n{e}", file=sys.stderr)
        return EXIT_INVALID
    return status


if __name__ == "__main__":
    sys.exit(main())
