"""Feynman-Kac resolvents ``u = (lam - L)^-1 f`` with zero boundary data, and
checks of their ``L_p`` decay in ``lam``.

``u(x) = E int_0^tau exp(-lam t) f(x_t) dt`` solves ``lam u - L u = f`` in
``B_R`` with ``u = 0`` on the boundary, so the boundary terms of the
resolvent estimates vanish and the ratio ``lam ||u||_p / ||f||_p`` is the
quantity to bound.  ``L`` is the generator of the simulated process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import coefficients as co
from .engine import Estimate, FunctionalSpec, Occupation, SimConfig, run_ensemble
from .estimate import HOLDS, INCONCLUSIVE, EstimateReport, _meta, _table, linear_fit
from .model import Domain, ProcessModel, ScalarField, check_assumption, lp_norm, sample_grid, sphere_area


@dataclass(frozen=True)
class ResolventProblem:
    """Data of one resolvent problem.

    ``R = inf`` means whole space; then ``window`` fixes the compact set on
    which both norms are taken.  ``p`` defaults to ``d`` (elliptic) or
    ``d + 1`` (parabolic).
    """

    model: ProcessModel
    f: ScalarField
    lam: float = 1.0
    R: float = math.inf
    kind: str = "elliptic"
    p: Optional[float] = None
    window: Optional[float] = None
    n_radial: int = 10
    grid_n: int = 33

    def __post_init__(self):
        if self.kind not in ("elliptic", "parabolic"):
            raise ValueError("kind must be 'elliptic' or 'parabolic'")
        if self.lam < 0 or (self.lam == 0 and math.isinf(self.R)):
            raise ValueError("lam must be positive (zero allowed only in bounded domains)")
        if not self.R > 0:
            raise ValueError("R must be positive")
        d = self.model.d
        pmin = d if self.kind == "elliptic" else d + 1
        if self.exponent < pmin:
            raise ValueError(f"p must be at least {pmin}")
        if math.isinf(self.R) and self.window is None:
            raise ValueError("whole-space problems need an evaluation window")
        if self.model.ellipticity is None:
            raise ValueError("resolvent problems need a uniformly elliptic model")
        r = max(self.radius, 1.0) if math.isfinite(self.radius) else 1.0
        rep = check_assumption(self.model, sample_grid(d, r, 9 if d == 3 else 21))
        if not (rep.passed and rep.ellipticity_ok):
            raise ValueError("coefficients violate the drift domination or ellipticity at a sample point")

    @property
    def exponent(self) -> float:
        if self.p is not None:
            return self.p
        return self.model.d if self.kind == "elliptic" else self.model.d + 1

    @property
    def radius(self) -> float:
        """Radius of the evaluation ball: ``R / 2``, or the window."""
        return self.R / 2 if math.isfinite(self.R) else self.window

    @property
    def source_radius(self) -> float:
        return self.R if math.isfinite(self.R) else self.window


@dataclass
class GridFunction:
    """Values of ``u`` at quadrature points with confidence intervals."""

    points: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    low_precision: np.ndarray = field(default=None)

    def norm(self, p) -> float:
        return float(np.sum(self.weights * np.maximum(self.values, 0.0) ** p) ** (1.0 / p))


def rotation_invariant(model: ProcessModel, f: ScalarField) -> bool:
    """True when the law of ``|x_t|`` from points of equal radius is the same."""
    from .catalog import isotropic

    if not isotropic(model):
        return False
    if model.drift_kind == co.DRIFT_CONST:
        return not np.any(model.drift_params != 0)
    if model.drift_kind == co.DRIFT_LINEAR:
        M = model.drift_params.reshape(model.d, model.d)
        return bool(np.allclose(M, M[0, 0] * np.eye(model.d)))
    if model.drift_kind == co.DRIFT_RADIAL and np.any(model.drift_params[4:4 + model.d] != 0):
        return False
    return f.radial_about(np.zeros(model.d))


def evaluation_points(d: int, radius: float, radial: bool, n_radial: int = 10, grid_n: int = 33):
    """Quadrature points and weights on ``B_radius``.

    Rotation-invariant problems use Gauss-Legendre nodes in ``r`` along the
    first axis (weights carry ``|S^{d-1}| r^{d-1}``); otherwise a
    ``grid_n^d`` midpoint grid on the enclosing cube is masked to the ball.
    """
    if radial:
        xg, wg = np.polynomial.legendre.leggauss(n_radial)
        r = 0.5 * radius * (xg + 1)
        w = 0.5 * radius * wg * sphere_area(d) * r ** (d - 1)
        pts = np.zeros((n_radial, d))
        pts[:, 0] = r
        return pts, w
    hcell = 2 * radius / grid_n
    ax = -radius + (np.arange(grid_n) + 0.5) * hcell
    mesh = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    keep = np.linalg.norm(mesh, axis=1) < radius
    return mesh[keep], np.full(int(keep.sum()), hcell**d)


def _step_for(config: SimConfig, lam: float, scale_h: bool) -> SimConfig:
    # the discount confines the integrand to t ~ 1/lam, so the step follows it
    if scale_h and lam > 1:
        return config.replace(time_step_h=config.time_step_h / lam)
    return config


def feynman_kac_u(problem: ResolventProblem, x0, config: SimConfig = SimConfig(), t0: float = 0.0,
                  workers=None) -> Estimate:
    """``E int_0^tau exp(-lam t) f(t0 + t, x_t) dt`` from ``x0``.

    ``tau`` is the exit from ``B_R`` (elliptic) or from ``[t0, R^2) x B_R``
    (parabolic); with ``R = inf`` the integral runs until the discount drops
    below the configured cutoff.
    """
    m = problem.model
    d = m.d
    x0 = tuple(float(v) for v in np.asarray(x0, dtype=float).reshape(d))
    f = problem.f.shifted(t0) if t0 else problem.f
    if f.is_zero:
        return Estimate(0.0, 0.0, config.n_paths, 0.0, 0.0, 0.0)
    R = problem.R
    if math.isinf(R):
        dom = Domain.whole(d, start=x0)
    elif problem.kind == "parabolic":
        if not t0 < R * R:
            raise ValueError("t0 must be below R^2")
        dom = Domain.cylinder(R * R - t0, R, d, start=x0)
    else:
        dom = Domain.ball(R, d, start=x0)
    disc = "t" if problem.lam > 0 else "none"
    st = run_ensemble(m, dom, FunctionalSpec.of(Occupation(f, "one", disc, problem.lam)), config,
                      workers=workers)
    return st.estimate(f"occ[one,{disc}]")


def resolvent_on_grid(problem: ResolventProblem, config: SimConfig, t0: float = 0.0, workers=None,
                      rel_precision: float = 0.1) -> GridFunction:
    """``u`` at the evaluation points of ``problem``; points use disjoint path ranges.

    A point is flagged low-precision when its CI half-width exceeds
    ``rel_precision`` of its value and the value is not negligible (above
    one percent of the largest value on the grid).
    """
    d = problem.model.d
    radial = rotation_invariant(problem.model, problem.f)
    pts, w = evaluation_points(d, problem.radius, radial, problem.n_radial, problem.grid_n)
    vals, lo, hi, hw = [], [], [], []
    for i, x in enumerate(pts):
        cfg = config.replace(path_offset=config.path_offset + i * config.n_paths)
        e = feynman_kac_u(problem, x, cfg, t0, workers)
        vals.append(e.mean)
        lo.append(e.ci_low)
        hi.append(e.ci_high)
        hw.append(e.halfwidth)
    vals = np.array(vals)
    hw = np.array(hw)
    big = np.abs(vals) > 0.01 * np.max(np.abs(vals), initial=0.0)
    low = big & (hw > rel_precision * np.abs(vals))
    return GridFunction(pts, w, vals, np.array(lo), np.array(hi), low)


def _source_norm(f: ScalarField, radius: float, p: float, t_range=None) -> float:
    d = f.d
    if t_range is None:
        return lp_norm(f, Domain.ball(radius, d), p)
    return lp_norm(f, Domain("half-space-time", radius, math.inf, (0.0,) * d, (0.0,) * d), p, t_range=t_range)


def check_elliptic_resolvent(problem: ResolventProblem, lam_grid: Sequence[float],
                             config: SimConfig = SimConfig(), spread: float = 2.0, scale_h: bool = True,
                             max_low_precision: float = 0.05, workers=None) -> EstimateReport:
    """``lam ||u_+||_{L_p(B_{R/2})} / ||f_+||_{L_p(B_R)}`` across ``lam_grid``.

    The fitted ``N(lam)`` must stay within the factor ``spread``; more than
    ``max_low_precision`` flagged points make the verdict inconclusive.
    With ``R = inf`` both norms are taken on ``B_window``.
    """
    p = problem.exponent
    rows = []
    ratios = []
    low_total = 0
    npts = 0
    fnorm = 0.0 if problem.f.is_zero else _source_norm(problem.f, problem.source_radius, p)
    for i, lam in enumerate(sorted(lam_grid)):
        pr = ResolventProblem(problem.model, problem.f, lam, problem.R, "elliptic", problem.p, problem.window,
                              problem.n_radial, problem.grid_n)
        cfg = _step_for(config, lam, scale_h).replace(path_offset=config.path_offset + i * 10**8)
        g = resolvent_on_grid(pr, cfg, workers=workers)
        un = g.norm(p)
        ratio = lam * un / fnorm if fnorm > 0 else 0.0
        ratios.append(ratio)
        low_total += int(g.low_precision.sum())
        npts += len(g.values)
        rows.append([lam, un, fnorm, ratio, int(g.low_precision.sum()), len(g.values)])
    pos = [r for r in ratios if r > 0]
    bounded = (max(pos) / min(pos) <= spread) if pos else True
    precise = low_total <= max_low_precision * npts
    verdict = HOLDS if bounded and precise else INCONCLUSIVE
    return EstimateReport(
        "check_elliptic_resolvent",
        "lam ||u_+||_{L_p(B_{R/2})} <= N ||(lam u - L u)_+||_{L_p(B_R)} (+ boundary term)",
        None, None, "fitted", max(ratios) if ratios else None, verdict,
        _meta(config, R=problem.R, p=p, window=problem.window, scenario=problem.model.name),
        {"fitted_N": ratios, "spread": (max(pos) / min(pos)) if pos else 1.0, "low_precision_points": low_total},
        {"elliptic_resolvent": _table(["lambda", "norm_u", "norm_f", "fitted_N", "low_precision", "points"], rows)})


def check_parabolic_resolvent(problem: ResolventProblem, lam_grid: Sequence[float],
                              t0_grid: Sequence[float] = (0.0,), config: SimConfig = SimConfig(),
                              tolerance: float = 0.1, spread: float = 2.0, n_time: int = 3,
                              scale_h: bool = True, workers=None) -> EstimateReport:
    """Parabolic resolvent with zero lateral and terminal data.

    Each ``lam`` uses the scale-matched data ``f_lam(t, x) = f(lam t,
    sqrt(lam) x)`` on ``[0, R_lam^2) x B_{R_lam}``, ``R_lam = R / sqrt(lam)``,
    with start times ``t0 / lam``.  Then ``||u(t0)||_{L_p(B_{R/2})}`` over
    ``||f||`` on ``[t0, R^2) x B_R`` is a power of ``lam`` whose regression
    exponent must be within ``tolerance`` of ``-(p - 1) / p``, and ``lam
    ||u_+||`` on ``[0, R^2/4) x B_{R/2}`` (Gauss nodes in time) over ``||f||``
    on the full cylinder must stay within ``spread``.  With ``R = inf`` the
    window ``W`` replaces ``R`` in every norm and scales the same way.
    """
    m = problem.model
    d = m.d
    p = problem.exponent
    lam_grid = sorted(float(v) for v in lam_grid)
    rho = problem.R if math.isfinite(problem.R) else problem.window
    if any(not 0 <= t0 <= rho * rho / 4 for t0 in t0_grid):
        raise ValueError("t0 must lie in [0, R^2/4]")
    tg, tw = np.polynomial.legendre.leggauss(n_time)
    rows51, rows52 = [], []
    ratios51 = {t0: [] for t0 in t0_grid}
    ratios52 = []
    zero = problem.f.is_zero
    for i, lam in enumerate(lam_grid):
        s = 1.0 / math.sqrt(lam)
        f_l = problem.f.dilated(s, time=True)
        R_l = problem.R * s
        W_l = problem.window * s if problem.window is not None else None
        rho_l = rho * s
        pr = ResolventProblem(m, f_l, lam, R_l, "parabolic", problem.p, W_l, problem.n_radial, problem.grid_n)
        cfg = config.replace(path_offset=config.path_offset + i * 10**8)
        if scale_h:
            cfg = cfg.replace(time_step_h=config.time_step_h / lam)
        # (a) fixed start times
        for j, t0 in enumerate(t0_grid):
            t0_l = t0 / lam
            if zero:
                un, fn = 0.0, 0.0
            else:
                g = resolvent_on_grid(pr, cfg.replace(path_offset=cfg.path_offset + j * 10**6), t0=t0_l,
                                      workers=workers)
                un = g.norm(p)
                fn = _source_norm(f_l, rho_l, p, (t0_l, rho_l**2))
            r = un / fn if fn > 0 else 0.0
            ratios51[t0].append(r)
            rows51.append([lam, t0, un, fn, r])
        # (b) quarter cylinder in space-time
        if zero:
            un2 = fn2 = 0.0
        else:
            T4 = rho_l**2 / 4
            acc = 0.0
            for k, (xk, wk) in enumerate(zip(tg, tw)):
                tk = 0.5 * T4 * (xk + 1)
                g = resolvent_on_grid(pr, cfg.replace(path_offset=cfg.path_offset + (50 + k) * 10**6), t0=tk,
                                      workers=workers)
                acc += 0.5 * T4 * wk * g.norm(p) ** p
            un2 = acc ** (1.0 / p)
            fn2 = _source_norm(f_l, rho_l, p, (0.0, rho_l**2))
        r2 = lam * un2 / fn2 if fn2 > 0 else 0.0
        ratios52.append(r2)
        rows52.append([lam, un2, fn2, r2])
    expected = -(p - 1) / p
    exps = {}
    ok = True
    if not zero:
        for t0, rs in ratios51.items():
            fit = linear_fit(np.log(lam_grid), np.log(rs))
            exps[str(t0)] = fit.slope
            ok &= abs(fit.slope - expected) <= tolerance
        pos = [r for r in ratios52 if r > 0]
        ok &= bool(pos) and max(pos) / min(pos) <= spread
    verdict = HOLDS if ok else INCONCLUSIVE
    return EstimateReport(
        "check_parabolic_resolvent",
        "||u(t0,.)||_{L_p(B_{R/2})} <= N lam^(-(p-1)/p) ||(lam u - L u)_+||_{L_p(C_{R^2,R}(t0))} (+ boundary term)",
        None, None, "fitted", max(ratios52) if ratios52 else None, verdict,
        _meta(config, R=problem.R, p=p, window=problem.window, scenario=m.name),
        {"expected_exponent": expected, "exponents": exps, "fitted_N_quarter": ratios52},
        {"parabolic_resolvent_t0": _table(["lambda", "t0", "norm_u_t0", "norm_f", "ratio"], rows51),
         "parabolic_resolvent_cylinder": _table(["lambda", "norm_u", "norm_f", "fitted_N"], rows52)})
