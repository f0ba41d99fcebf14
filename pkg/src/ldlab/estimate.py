"""Checkers that estimate the left-hand side of an occupation or tail bound
by simulation and compare it with a ledger bound or a fitted constant.

Every checker returns an :class:`EstimateReport`.  The verdict is
``"violated-beyond-CI"`` only when the lower confidence limit of the
estimated left-hand side exceeds a numerically known right-hand side;
shape checks that fail (bad fits, unstable fitted constants) give
``"inconclusive"``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import coefficients as co
from .engine import (Estimate, FunctionalSpec, Hitting, MaxDisplacement, Occupation, Phi, PhiOutside,
                     SimConfig, TargetSet, run_ensemble, summarize)
from .ledger import ledger
from .model import Domain, ProcessModel, ScalarField, WeightFunction, ball_volume, lp_norm, sample_grid
from .oracles import counterexample_oracle

HOLDS = "holds"
VIOLATED = "violated-beyond-CI"
INCONCLUSIVE = "inconclusive"
VERDICTS = (HOLDS, VIOLATED, INCONCLUSIVE)

MIN_EVENTS = 30
MIN_R2 = 0.9


@dataclass
class EstimateReport:
    """Outcome of one checker.

    ``lhs`` is the main estimate (mean and confidence interval), ``rhs`` the
    bound it is compared against when one is numerically available, and
    ``tables`` holds per-threshold or per-parameter rows for CSV export.
    """

    checker: str
    inequality: str
    lhs: Optional[dict]
    rhs: Optional[float]
    constant_source: str
    fitted: Optional[float]
    verdict: str
    metadata: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")

    def as_dict(self) -> dict:
        return _clean(asdict(self))


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def _table(columns, rows):
    return {"columns": list(columns), "rows": [list(r) for r in rows]}


def _meta(cfg: SimConfig, **extra):
    out = {"master_seed": cfg.master_seed, "n_paths": cfg.n_paths, "time_step_h": cfg.time_step_h,
           "exit_correction": cfg.exit_correction, "max_time": cfg.max_time}
    out.update(extra)
    return out


def _start(d, x=None, kappa=0.0, R=1.0):
    if x is not None:
        x = tuple(float(v) for v in np.asarray(x, dtype=float).reshape(d))
        return x
    return (kappa * R,) + (0.0,) * (d - 1)


def _ci_scaled(est: Estimate, c: float) -> dict:
    return {"mean": est.mean * c, "ci_low": est.ci_low * c, "ci_high": est.ci_high * c}


def _bound_verdict(est: Estimate, rhs: float) -> str:
    return VIOLATED if est.ci_low > rhs else HOLDS


def _ledger_for(model: ProcessModel, assumed_N_d: float):
    return ledger(model.d, model.envelope.norm_Ld, assumed_N_d)


def _z(level):
    return float(stats.norm.ppf(0.5 + 0.5 * level))


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float
    slope_se: float
    n: int


def linear_fit(x, y) -> LinearFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return LinearFit(math.nan, math.nan, math.nan, math.nan, len(x))
    if len(x) == 2:
        s = (y[1] - y[0]) / (x[1] - x[0])
        return LinearFit(float(s), float(y[0] - s * x[0]), 1.0, math.nan, 2)
    r = stats.linregress(x, y)
    return LinearFit(float(r.slope), float(r.intercept), float(r.rvalue**2), float(r.stderr), len(x))


def _proportion_ci(p, n, z):
    hw = z * math.sqrt(max(p * (1 - p), 0.0) / n) if n else math.nan
    return p - hw, p + hw


# ------------------------------------------------------ elliptic occupation


def check_elliptic_aleksandrov(model: ProcessModel, f: ScalarField, R: float = 1.0, x=None,
                               config: SimConfig = SimConfig(), assumed_N_d: float = 1.0,
                               max_censored: float = 1e-3, workers=None) -> EstimateReport:
    """Occupation of ``f`` weighted by ``det(a)^(1/d)`` up to the exit from ``B_R``.

    Bound: ``N_{d,|b|} R ||f||_{L_d(B_R)}`` with the ledger constant.  The
    fitted constant ``lhs / (R ||f||)`` is reported for cross-scenario fits.
    """
    d = model.d
    x = _start(d, x)
    if not np.linalg.norm(x) < R:
        raise ValueError("start point must satisfy |x| < R")
    L = _ledger_for(model, assumed_N_d)
    norm = lp_norm(f, Domain.ball(R, d), d)
    if f.is_zero:
        est = Estimate(0.0, 0.0, config.n_paths, 0.0, 0.0, 0.0)
        cens = 0.0
    else:
        st = run_ensemble(model, Domain.ball(R, d, start=x), FunctionalSpec.of(Occupation(f, "det_d")),
                          config, workers=workers)
        est = st.estimate("occ[det_d,none]")
        cens = st.censored_fraction
    rhs = L.N_db * R * norm
    fitted = est.mean / (R * norm) if norm > 0 else 0.0
    verdict = _bound_verdict(est, rhs)
    if cens > max_censored and verdict == HOLDS:
        verdict = INCONCLUSIVE
    return EstimateReport(
        "check_elliptic_aleksandrov",
        "E int_0^tau_R f(x+x_t) det(a_t)^(1/d) dt <= N_{d,|b|} R ||f||_{L_d(B_R)}",
        est.as_dict(), rhs, f"ledger(N_d={assumed_N_d:g})", fitted, verdict,
        _meta(config, R=R, x=list(x), scenario=model.name),
        {"norm_f": norm, "N_db": L.N_db, "censored_fraction": cens,
         "fitted_ci": [est.ci_low / (R * norm), est.ci_high / (R * norm)] if norm > 0 else [0.0, 0.0]})


def check_aleksandrov_scaling(model: ProcessModel, f: ScalarField, scale: float = 2.0, x=None,
                              config: SimConfig = SimConfig(), assumed_N_d: float = 1.0,
                              workers=None) -> EstimateReport:
    """Fitted constants at ``(R = 1, f)`` and ``(R = c, f(./c))`` must agree.

    Runs use disjoint path ranges; the verdict compares the difference with
    the joint confidence half-width.
    """
    d = model.d
    x = np.asarray(_start(d, x))
    a = check_elliptic_aleksandrov(model, f, 1.0, x, config, assumed_N_d, workers=workers)
    cfg2 = config.replace(path_offset=config.path_offset + config.n_paths,
                          time_step_h=config.time_step_h * scale**2,
                          max_time=config.max_time * scale**2)
    b = check_elliptic_aleksandrov(model, f.dilated(scale), scale, x * scale, cfg2, assumed_N_d,
                                   workers=workers)
    n1, n2 = a.fitted, b.fitted
    hw1 = 0.5 * (a.details["fitted_ci"][1] - a.details["fitted_ci"][0])
    hw2 = 0.5 * (b.details["fitted_ci"][1] - b.details["fitted_ci"][0])
    joint = math.hypot(hw1, hw2)
    agree = abs(n1 - n2) <= joint
    verdict = HOLDS if agree else VIOLATED
    if INCONCLUSIVE in (a.verdict, b.verdict):
        verdict = INCONCLUSIVE
    return EstimateReport(
        "check_aleksandrov_scaling",
        "fitted N at (R, f) equals fitted N at (cR, f(./c))",
        a.lhs, None, "fitted", n1, verdict, _meta(config, scale=scale, scenario=model.name),
        {"fitted_R1": n1, "fitted_Rc": n2, "joint_halfwidth": joint, "difference": n1 - n2,
         "lhs_R1": a.lhs, "lhs_Rc": b.lhs},
        {"scaling": _table(["R", "lhs", "norm_f", "fitted_N", "fitted_lo", "fitted_hi"],
                           [[1.0, a.lhs["mean"], a.details["norm_f"], n1, *a.details["fitted_ci"]],
                            [scale, b.lhs["mean"], b.details["norm_f"], n2, *b.details["fitted_ci"]]])})


# ------------------------------------------------------------ psi moments


def check_psi_moments(model: ProcessModel, R: float = 1.0, x=None, n_max: int = 4,
                      config: SimConfig = SimConfig(), spread: float = 2.0,
                      max_relative_halfwidth: float = 0.5, workers=None) -> EstimateReport:
    """Moments ``I_n = E psi^n`` at the exit from ``B_R`` and ``N_n = (I_n / n!)^(1/n) / R^2``.

    The bound ``I_n <= N^n n! R^(2n)`` says the ``N_n`` stay bounded; the
    check asks for ``max N_n / min N_n <= spread`` over moments whose
    confidence half-width is below ``max_relative_halfwidth`` of the mean.
    """
    if not 1 <= n_max <= 4:
        raise ValueError("n_max must lie in 1..4")
    d = model.d
    x = _start(d, x)
    st = run_ensemble(model, Domain.ball(R, d, start=x), FunctionalSpec(), config, workers=workers)
    psi = st.samples["psi"][st.valid]
    rows = []
    fitted = []
    partial = False
    moments = []
    for n in range(1, n_max + 1):
        e = summarize(psi**n, config.batch_count, config.ci_level)
        Nn = (e.mean / math.factorial(n)) ** (1.0 / n) / R**2 if e.mean > 0 else 0.0
        ok = e.mean == 0 or e.halfwidth <= max_relative_halfwidth * e.mean
        partial |= not ok
        if ok:
            fitted.append(Nn)
        rows.append([n, e.mean, e.ci_low, e.ci_high, Nn, int(ok)])
        moments.append(e.as_dict())
    pos = [v for v in fitted if v > 0]
    ratio = max(pos) / min(pos) if pos else 1.0
    verdict = HOLDS if ratio <= spread and fitted else INCONCLUSIVE
    return EstimateReport(
        "check_psi_moments", "E psi_tau^n <= N^n n! R^(2n)",
        moments[0], None, "fitted", max(fitted) if fitted else None, verdict,
        _meta(config, R=R, x=list(x), n_max=n_max, scenario=model.name),
        {"moments": moments, "fitted_N_n": [r[4] for r in rows], "spread": ratio, "partial": partial,
         "censored_fraction": st.censored_fraction},
        {"psi_moments": _table(["n", "I_n", "ci_low", "ci_high", "N_n", "used"], rows)})


# -------------------------------------------------------------- psi tail


def check_psi_exp_tail(model: ProcessModel, t_grid: Sequence[float], R_list: Sequence[float] = (1.0, 2.0),
                       x=None, config: SimConfig = SimConfig(), rtol: float = 0.2,
                       scale_h: bool = True, workers=None) -> EstimateReport:
    """Exponential tail of ``psi`` at the exit from ``B_R``.

    For each ``R`` the empirical ``P(psi >= t R^2)`` on ``t_grid`` is fitted
    by ``log P = c - nu t``; thresholds with fewer than 30 exceedances are
    dropped.  Holds when every fit has negative slope with coefficient of
    determination at least 0.9, the used points span a decade of decay, and
    the rates ``nu`` agree across ``R`` within ``rtol``.
    """
    d = model.d
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    rows = []
    rates = []
    fits = {}
    ok = True
    for i, R in enumerate(R_list):
        xs = np.asarray(_start(d, x)) * R
        cfg = config.replace(path_offset=config.path_offset + i * config.n_paths)
        if scale_h:
            cfg = cfg.replace(time_step_h=config.time_step_h * R * R, max_time=config.max_time * R * R)
        st = run_ensemble(model, Domain.ball(R, d, start=tuple(xs)), FunctionalSpec(), cfg, workers=workers)
        prob, cnt = st.tail("psi", t_grid * R * R)
        cens_psi = st.samples["psi"][st.status == 1]
        limit = cens_psi.min() / (R * R) if len(cens_psi) else math.inf
        use = (cnt >= MIN_EVENTS) & (t_grid < limit) & (prob > 0)
        fit = linear_fit(t_grid[use], np.log(prob[use]))
        nu = -fit.slope
        fits[R] = asdict(fit)
        decade = use.sum() >= 2 and prob[use].max() / prob[use].min() >= 10
        ok &= bool(fit.slope < 0 and fit.r2 >= MIN_R2 and decade)
        rates.append(nu)
        for t, p, c, u in zip(t_grid, prob, cnt, use):
            rows.append([R, t, p, int(c), int(u)])
    stable = max(rates) <= (1 + rtol) * min(rates) if all(r > 0 for r in rates) else False
    verdict = HOLDS if ok and stable else INCONCLUSIVE
    return EstimateReport(
        "check_psi_exp_tail", "P(psi_tau >= t) <= N exp(-nu t / R^2)",
        None, None, "fitted", rates[0], verdict,
        _meta(config, R_list=list(R_list), scenario=model.name),
        {"rates": rates, "fits": {str(k): v for k, v in fits.items()}, "stable": stable},
        {"psi_tail": _table(["R", "t_over_R2", "P", "events", "used"], rows)})


# ---------------------------------------------------------- exit lower tail


def check_exit_lower_tail(model: ProcessModel, t_grid: Sequence[float], R_list: Sequence[float] = (1.0, 2.0),
                          kappa: float = 0.0, lam_grid: Sequence[float] = (1.0, 4.0, 16.0),
                          config: SimConfig = SimConfig(), assumed_N_d: float = 1.0, rtol: float = 0.2,
                          laplace_paths: Optional[int] = None, ledger_radius_check: bool = True,
                          workers=None) -> EstimateReport:
    """Small-``phi`` tail at the exit from ``B_R`` started at ``|x| = kappa R``.

    (a) ``log P(phi_tau <= t R^2)`` is regressed on ``1/t``; the fitted
    ``beta = -slope / (1 - kappa)^2`` must be positive, the fit linear, and
    stable across ``R_list`` within ``rtol``.  (b) ``E 1_{tau<inf} exp(-lam
    phi_tau)`` is compared with ``2 exp(-sqrt(lam) (1 - kappa) R / N)`` for
    the ledger ``N``.  (c) every tail point is compared with ``2 exp(-beta
    (1 - kappa)^2 / t)`` for the ledger ``beta``.  (d) optionally, ``E
    1_{tau<inf} exp(-phi_tau) <= 1/2`` at the ledger radius.
    """
    if not 0 <= kappa < 1:
        raise ValueError("kappa must lie in [0, 1)")
    if model.ellipticity is None and not model.nondegenerate_at_infinity:
        raise ValueError("model must be nondegenerate at infinity (set an ellipticity)")
    d = model.d
    L = _ledger_for(model, assumed_N_d)
    z = _z(config.ci_level)
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    tr_min = d * model.ellipticity if model.ellipticity else None
    rows, lap_rows = [], []
    betas, fits = [], {}
    shape_ok = True
    violated = False
    for i, R in enumerate(R_list):
        xs = (kappa * R,) + (0.0,) * (d - 1)
        h = config.time_step_h * R * R
        horizon = config.max_time * R * R
        if tr_min:
            horizon = min(horizon, 1.05 * t_grid.max() * R * R / tr_min)
        cfg = config.replace(time_step_h=min(h, 0.5 * horizon), max_time=horizon,
                             path_offset=config.path_offset + 2 * i * config.n_paths)
        st = run_ensemble(model, Domain.ball(R, d, start=xs), FunctionalSpec(), cfg, workers=workers)
        phi = st.samples["phi"][st.valid]
        exited = st.status[st.valid] == 0
        n = len(phi)
        # censored paths carry phi at the horizon, a lower bound for phi_tau
        limit = phi[~exited].min() / (R * R) if (~exited).any() else math.inf
        cnt = np.array([np.sum(exited & (phi <= t * R * R)) for t in t_grid])
        prob = cnt / n
        use = (cnt >= MIN_EVENTS) & (t_grid < limit)
        fit = linear_fit(1.0 / t_grid[use], np.log(prob[use]))
        beta = -fit.slope / (1 - kappa) ** 2
        fits[R] = asdict(fit)
        betas.append(beta)
        shape_ok &= bool(fit.slope < 0 and fit.r2 >= MIN_R2)
        for t, p, c, u in zip(t_grid, prob, cnt, use):
            lo, _ = _proportion_ci(p, n, z)
            bound = 2 * math.exp(-L.beta * (1 - kappa) ** 2 / t)
            bad = lo > bound
            violated |= bad
            rows.append([R, t, p, int(c), int(u), bound, int(bad)])
        if lam_grid:
            m = laplace_paths or max(config.batch_count, config.n_paths // 4)
            cfg_l = config.replace(time_step_h=h, max_time=config.max_time * R * R, n_paths=m,
                                   path_offset=config.path_offset + (2 * i + 1) * config.n_paths)
            sl = run_ensemble(model, Domain.ball(R, d, start=xs), FunctionalSpec(), cfg_l, workers=workers)
            ex = (sl.status[sl.valid] == 0).astype(float)
            ph = sl.samples["phi"][sl.valid]
            for lam in lam_grid:
                e = summarize(ex * np.exp(-lam * ph), config.batch_count, config.ci_level)
                bound = 2 * math.exp(-math.sqrt(lam) * (1 - kappa) * R / L.N_tail)
                bad = e.ci_low > bound
                violated |= bad
                lap_rows.append([R, lam, e.mean, e.ci_low, e.ci_high, bound, int(bad)])
    stable = all(b > 0 for b in betas) and max(betas) <= (1 + rtol) * min(betas)
    details = {"betas": betas, "fits": {str(k): v for k, v in fits.items()}, "stable": stable,
               "ledger_beta": L.beta, "ledger_N": L.N_tail}
    if ledger_radius_check:
        details["ledger_radius"] = _ledger_radius_laplace(model, L.R, config, workers)
        violated |= details["ledger_radius"]["ci_low"] > 0.5
    if violated:
        verdict = VIOLATED
    elif shape_ok and stable:
        verdict = HOLDS
    else:
        verdict = INCONCLUSIVE
    tables = {"exit_lower_tail": _table(["R", "t_over_R2", "P", "events", "used", "ledger_bound", "violated"], rows)}
    if lap_rows:
        tables["laplace"] = _table(["R", "lambda", "mean", "ci_low", "ci_high", "ledger_bound", "violated"], lap_rows)
    return EstimateReport(
        "check_exit_lower_tail", "P(phi_tau <= t R^2) <= 2 exp(-beta (1 - kappa)^2 / t)",
        None, None, f"ledger(N_d={assumed_N_d:g}) and fitted", betas[0], verdict,
        _meta(config, R_list=list(R_list), kappa=kappa, scenario=model.name), details, tables)


def _ledger_radius_laplace(model, R, config, workers, paths=1000):
    """``E 1_{tau<inf} exp(-phi_tau)`` for ``B_R`` at the ledger radius, with discount truncation."""
    d = model.d
    lam_field = ScalarField.zero(d)
    fs = FunctionalSpec.of(Occupation(lam_field, "one", "phi", 1.0))
    cfg = config.replace(n_paths=max(paths, config.batch_count), max_time=math.inf,
                         discount_cutoff=max(config.discount_cutoff, 1e-6),
                         time_step_h=max(config.time_step_h, 1e-3))
    st = run_ensemble(model, Domain.ball(R, d), fs, cfg, workers=workers)
    ex = (st.status[st.valid] == 0).astype(float)
    val = ex * np.exp(-st.samples["phi"][st.valid])
    e = summarize(val, cfg.batch_count, cfg.ci_level)
    # truncated paths contribute at most the cutoff
    hi = e.ci_high + cfg.discount_cutoff
    return {"R": R, "mean": e.mean, "ci_low": e.ci_low, "ci_high": hi, "bound": 0.5,
            "truncated_fraction": st.count("truncated") / st.n_paths}


# -------------------------------------------------------- max inequality


def _max_trace(model: ProcessModel):
    pts = sample_grid(model.d, 4.0, 21)
    a = model.diffusion(0.0, pts)
    return float(np.max(np.trace(a, axis1=1, axis2=2)))


def check_max_inequality(model: ProcessModel, R_grid: Sequence[float] = (0.5, 1.0, 1.5, 2.0, 2.5),
                         n_grid: Sequence[int] = (1, 2), scales: Sequence[float] = (0.25, 1.0, 4.0),
                         s: float = 0.0, t: float = 1.0, x=None, config: SimConfig = SimConfig(),
                         spread: float = 1.5, K: Optional[float] = None, workers=None) -> EstimateReport:
    """Maximal displacement over ``[s, t]`` in whole space.

    Tail: ``log P(max |x_r - x_s| >= R sqrt(t - s))`` regressed on ``R^2 / K``
    with ``K >= tr a``.  Moments: ``E max^(2n) / (t - s)^n`` over ``scales``
    must vary by at most the factor ``spread``.  Coefficients are time
    homogeneous, so only ``t - s`` matters.
    """
    if not t > s:
        raise ValueError("need t > s")
    d = model.d
    K = K or _max_trace(model)
    x = _start(d, x)
    T = t - s
    fs = FunctionalSpec.of(MaxDisplacement())
    st = run_ensemble(model, Domain.whole(d, start=x), fs,
                      config.replace(max_time=T, time_step_h=min(config.time_step_h, T / 10)), workers=workers)
    m = st.samples["max_disp"][st.valid]
    R_grid = np.asarray(R_grid, dtype=float)
    cnt = np.array([np.sum(m >= r * math.sqrt(T)) for r in R_grid])
    prob = cnt / len(m)
    use = (cnt >= MIN_EVENTS) & (R_grid > 0)
    fit = linear_fit(R_grid[use] ** 2 / K, np.log(prob[use]))
    beta = -fit.slope
    tail_ok = fit.slope < 0 and fit.r2 >= MIN_R2 and use.sum() >= 3
    violated = bool(np.any(prob > 2.0))
    mrows = []
    spreads = {}
    for k, sc in enumerate(scales):
        cfg = config.replace(max_time=sc, time_step_h=config.time_step_h * sc / T,
                             path_offset=config.path_offset + (k + 1) * config.n_paths)
        sm = run_ensemble(model, Domain.whole(d, start=x), fs, cfg, workers=workers)
        mm = sm.samples["max_disp"][sm.valid]
        for n in n_grid:
            e = summarize(mm ** (2 * n) / sc**n, config.batch_count, config.ci_level)
            mrows.append([sc, n, e.mean, e.ci_low, e.ci_high])
    for n in n_grid:
        vals = [r[2] for r in mrows if r[1] == n]
        spreads[n] = max(vals) / min(vals) if min(vals) > 0 else math.inf
    moments_ok = all(v <= spread for v in spreads.values())
    verdict = VIOLATED if violated else (HOLDS if tail_ok and moments_ok else INCONCLUSIVE)
    return EstimateReport(
        "check_max_inequality", "P(max_[s,t] |x_r - x_s| >= R sqrt(t - s)) <= 2 exp(-beta R^2 / K)",
        None, 2.0, "fitted", beta, verdict, _meta(config, K=K, t_minus_s=T, scenario=model.name),
        {"tail_fit": asdict(fit), "moment_spread": {str(k): v for k, v in spreads.items()},
         "K": K},
        {"max_tail": _table(["R", "P", "events", "used"],
                            [[r, p, int(c), int(u)] for r, p, c, u in zip(R_grid, prob, cnt, use)]),
         "max_moments": _table(["t_minus_s", "n", "moment_ratio", "ci_low", "ci_high"], mrows)})


# --------------------------------------------------------------- hitting


def _shape_measure(kind, r_in, r_out, d):
    return ball_volume(d, r_out) - (ball_volume(d, r_in) if kind == co.SHAPE_ANNULUS else 0.0)


def target_measure(target: TargetSet, d: int, T: Optional[float] = None, resolution: int = 400) -> float:
    """Lebesgue measure of a target set, in space (``T=None``) or in ``[0, T) x R^d``.

    Disjoint unions are summed exactly; overlapping ones are measured on a
    grid of ``resolution`` cells per axis over each time segment.
    """
    shapes = target.shapes

    def window(s):
        lo, hi = s[4], s[5]
        if T is None:
            return 1.0
        return max(0.0, min(hi, T) - max(lo, 0.0))

    def overlap(a, b):
        ca, cb = np.asarray(a[3], dtype=float), np.asarray(b[3], dtype=float)
        return np.linalg.norm(ca - cb) < a[2] + b[2]

    disjoint = all(not overlap(a, b) for i, a in enumerate(shapes) for b in shapes[i + 1:])
    if disjoint or T is None and len(shapes) == 1:
        return float(sum(_shape_measure(s[0], s[1], s[2], d) * window(s) for s in shapes))
    # time segments on which the active family is constant
    cuts = {0.0}
    if T is not None:
        cuts |= {T} | {v for s in shapes for v in (s[4], s[5]) if 0 < v < T}
    cuts = sorted(cuts) if T is not None else [0.0, 1.0]
    lo = np.min([np.asarray(s[3]) - s[2] for s in shapes], axis=0)
    hi = np.max([np.asarray(s[3]) + s[2] for s in shapes], axis=0)
    hcell = (hi - lo) / resolution
    axes = [lo[k] + (np.arange(resolution) + 0.5) * hcell[k] for k in range(d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (a + b)
        inside = np.zeros(len(pts), dtype=bool)
        for s in shapes:
            if T is not None and not (s[4] <= mid < s[5]):
                continue
            r = np.linalg.norm(pts - np.asarray(s[3]), axis=1)
            inside |= (r <= s[2]) & (r >= s[1])
        total += inside.sum() * float(np.prod(hcell)) * (b - a)
    return float(total)


def check_hitting(model: ProcessModel, targets, gammas, R: float = 1.0, kappa: float = 0.0, x=None,
                  parabolic: bool = False, config: SimConfig = SimConfig(), workers=None) -> EstimateReport:
    """Probability of reaching a target set before leaving ``B_R`` (or ``C_{R^2,R}``).

    ``targets`` is one :class:`TargetSet` or a nested increasing family;
    each must satisfy ``|target| >= gamma |B_R|`` (``|C_{R^2,R}|`` when
    ``parabolic``).  Holds when every probability is positive beyond its
    CI and the family's estimates are nondecreasing within joint CI.
    """
    if isinstance(targets, TargetSet):
        targets = [targets]
    if np.isscalar(gammas):
        gammas = [gammas] * len(targets)
    if len(gammas) != len(targets):
        raise ValueError("one gamma per target")
    if model.ellipticity is None:
        raise ValueError("hitting checks need a uniformly elliptic model")
    d = model.d
    x = _start(d, x, kappa, R)
    T = R * R if parabolic else None
    full = ball_volume(d, R) * (T if parabolic else 1.0)
    for tg, g in zip(targets, gammas):
        for s in tg.shapes:
            if np.linalg.norm(np.asarray(s[3], dtype=float)) + s[2] > R * (1 + 1e-12):
                raise ValueError("target must lie in the closed ball of radius R")
        m = target_measure(tg, d, T)
        if m < g * full * (1 - 1e-9):
            raise ValueError(f"target measure {m:.6g} is below gamma |domain| = {g * full:.6g}")
    domain = Domain.cylinder(T, R, d, start=x) if parabolic else Domain.ball(R, d, start=x)
    rows = []
    ests = []
    for i, (tg, g) in enumerate(zip(targets, gammas)):
        st = run_ensemble(model, domain, FunctionalSpec.of(Hitting(tg)), config, workers=workers)
        e = st.estimate("hit")
        ests.append(e)
        rows.append([g, target_measure(tg, d, T) / full, e.mean, e.ci_low, e.ci_high])
    monotone = all(b.mean >= a.mean - math.hypot(a.halfwidth, b.halfwidth)
                   for a, b in zip(ests[:-1], ests[1:]))
    positive = all(e.ci_low > 0 or e.mean == 1.0 for e in ests)
    verdict = HOLDS if positive and monotone else (VIOLATED if not monotone else INCONCLUSIVE)
    return EstimateReport(
        "check_hitting", "P(tau_Gamma <= tau_R) >= q(gamma) > 0",
        ests[0].as_dict(), None, "fitted", ests[0].ci_low, verdict,
        _meta(config, R=R, x=list(x), parabolic=parabolic, scenario=model.name),
        {"estimates": [e.as_dict() for e in ests], "monotone": monotone},
        {"hitting": _table(["gamma", "measure_fraction", "P", "ci_low", "ci_high"], rows)})


# ---------------------------------------------------- parabolic occupation


def check_parabolic_aleksandrov(model: ProcessModel, f: ScalarField, R: float = 1.0, x=None,
                                config: SimConfig = SimConfig(), assumed_N_d: float = 1.0,
                                max_censored: float = 1e-3, workers=None) -> EstimateReport:
    """Occupation of a space-time ``f`` weighted by ``det(a)^(1/(d+1))`` up to the exit from ``B_R``.

    Bound: ``N_{d,|b|} R^(d/(d+1)) ||f||_{L_{d+1}([0,inf) x B_R)}``; ``f``
    must have bounded time support so the norm is finite.
    """
    d = model.d
    x = _start(d, x)
    if not f.is_zero and math.isinf(f.time_support()[1]):
        raise ValueError("f needs a finite time support")
    L = _ledger_for(model, assumed_N_d)
    cyl = Domain("half-space-time", R, math.inf, (0.0,) * d, (0.0,) * d)
    norm = lp_norm(f, cyl, d + 1) if not f.is_zero else 0.0
    if f.is_zero:
        est = Estimate(0.0, 0.0, config.n_paths, 0.0, 0.0, 0.0)
        cens = 0.0
    else:
        dom = Domain("half-space-time", R, math.inf, (0.0,) * d, x)
        st = run_ensemble(model, dom, FunctionalSpec.of(Occupation(f, "det_d1")), config, workers=workers)
        est = st.estimate("occ[det_d1,none]")
        cens = st.censored_fraction
    scale = R ** (d / (d + 1))
    rhs = L.N_db * scale * norm
    fitted = est.mean / (scale * norm) if norm > 0 else 0.0
    verdict = _bound_verdict(est, rhs)
    if cens > max_censored and verdict == HOLDS:
        verdict = INCONCLUSIVE
    return EstimateReport(
        "check_parabolic_aleksandrov",
        "E int_0^tau_R f(t, x+x_t) det(a_t)^(1/(d+1)) dt <= N_{d,|b|} R^(d/(d+1)) ||f||_{L_{d+1}(C_R)}",
        est.as_dict(), rhs, f"ledger(N_d={assumed_N_d:g})", fitted, verdict,
        _meta(config, R=R, x=list(x), scenario=model.name),
        {"norm_f": norm, "N_db": L.N_db, "censored_fraction": cens})


# ------------------------------------------------- discounted whole space


DISCOUNTED_VARIANTS = {
    # variant: (density, discount, weight kind, exponent(d, p), inequality)
    "local": ("det_d", "phi", None, None,
              "E int_0^inf exp(-phi_t) f(x+x_t) det(a_t)^(1/d) dt <= N ||f||_{L_d(B_1)}"),
    "decay": ("det_d", "phi", None, None,
              "E int_0^inf exp(-phi_t) f(x+x_t) det(a_t)^(1/d) dt <= N exp(-mu |x|) ||f||_{L_d(B_1)}"),
    "global": ("det_d", "phi", "psi", lambda d, p: d / (2 * p) - 1,
               "E int_0^inf exp(-lam phi_t) f(x_t) det(a_t)^(1/d) dt <= N lam^(d/(2p)-1) ||f / Psi_lam||_{L_p}"),
    "annulus": ("det_d", "phi_out", "psi_R", lambda d, p: d / (2 * p) - 1,
                "E int_0^inf exp(-lam phi_t(B_R^c)) f(x_t) det(a_t)^(1/d) dt"
                " <= N (R sqrt(lam) + R0)^(2-d/p) lam^(d/(2p)-1) ||f / Psi_{R,lam}||_{L_p}"),
    "parabolic": ("det_d1", "phi", "psi", lambda d, p: -d / (2 * d + 2),
                  "E int_0^inf exp(-lam phi_t) f(t, x_t) det(a_t)^(1/(d+1)) dt"
                  " <= N lam^(-d/(2d+2)) ||f / Psi_lam||_{L_{d+1}(R^(d+1))}"),
    "parabolic-p": ("det_d1", "t_phi", "phi", lambda d, p: (d + 2) / (2 * p) - 1,
                    "E int_0^inf exp(-lam t - lam phi_t) f(t, x_t) det(a_t)^(1/(d+1)) dt"
                    " <= N lam^((d+2)/(2p)-1) ||Phi_lam f||_{L_p(R^(d+1))}"),
}


def _discounted_lhs(model, f, x, density, discount, lam, cfg, workers, radius_out=None,
                    rtol=0.01):
    d = model.d
    reqs = [Occupation(f, density, discount, lam)]
    if discount == "phi_out":
        reqs.append(PhiOutside(radius_out))
    fs = FunctionalSpec.of(*reqs)
    key = f"occ[{density},{discount}]"
    dom = Domain.whole(d, start=tuple(x))
    for attempt in range(2):
        st = run_ensemble(model, dom, fs, cfg, workers=workers)
        est = st.estimate(key)
        # after truncation the remaining discounted integral is at most
        # cutoff * sup f * int exp(-lam phi) dphi / d
        sup = f.sup
        bound = cfg.discount_cutoff * sup / (lam * d) if discount in ("phi", "t_phi") else 0.0
        if not np.isfinite(bound):
            bound = 0.0
        if bound <= rtol * max(est.mean, 0.0) or est.mean == 0:
            return est, bound, True, st
        cfg = cfg.replace(discount_cutoff=cfg.discount_cutoff * 1e-4)
    return est, bound, False, st


def check_discounted_whole_space(model: ProcessModel, f: ScalarField, p: float, lam_grid: Sequence[float],
                                 variant: str = "global", config: SimConfig = SimConfig(), x=None,
                                 mu: float = 1.0, R: float = 1.0, R0: Optional[float] = None,
                                 positions: Sequence[float] = (0.0, 2.0, 4.0), tolerance: float = 0.1,
                                 scale_h: bool = True, assumed_N_d: float = 1.0,
                                 workers=None) -> EstimateReport:
    """Discounted whole-space occupation bounds.

    ``local`` and ``decay`` use the unit discount ``exp(-phi)``; ``decay``
    additionally fits ``mu`` from the estimates at ``|x| in positions``.
    The remaining variants test the power of ``lam``: each ``lam`` is run
    on the scale-matched data ``f_lam(t, x) = f(lam t, sqrt(lam) x)`` (and
    ``R / sqrt(lam)``, ``h / lam``), for which the ratio of the left-hand
    side to the weighted norm is a pure power of ``lam``; the regression
    exponent must match within ``tolerance``.
    """
    if variant not in DISCOUNTED_VARIANTS:
        raise ValueError(f"variant must be one of {sorted(DISCOUNTED_VARIANTS)}")
    d = model.d
    density, discount, wkind, expo, ineq = DISCOUNTED_VARIANTS[variant]
    parabolic = variant.startswith("parabolic")
    pmin = d + 1 if parabolic else d
    if variant == "parabolic":
        p = d + 1
    if p < pmin:
        raise ValueError(f"p must be at least {pmin}")
    x0 = np.asarray(_start(d, x))
    meta = _meta(config, variant=variant, p=p, scenario=model.name)
    rows = []
    if variant in ("local", "decay"):
        if f.support_radius() > 1 + 1e-12:
            raise ValueError("f must vanish outside the unit ball")
        norm = lp_norm(f, Domain.ball(1.0, d), d)
        xs = [x0] if variant == "local" else [np.array((r,) + (0.0,) * (d - 1)) for r in positions]
        ests = []
        for i, xi in enumerate(xs):
            cfg = config.replace(path_offset=config.path_offset + i * config.n_paths)
            est, bound, ok, _ = _discounted_lhs(model, f, xi, density, discount, 1.0, cfg, workers)
            ests.append(est)
            rows.append([float(np.linalg.norm(xi)), est.mean, est.ci_low, est.ci_high, bound, int(ok)])
        fitted = ests[0].mean / norm if norm > 0 else 0.0
        details = {"norm_f": norm}
        verdict = HOLDS
        if variant == "decay":
            means = np.array([e.mean for e in ests])
            if np.all(means > 0):
                fit = linear_fit(np.asarray(positions), np.log(means))
                mu_hat = -fit.slope
                decreasing = all(b < a for a, b in zip(means[:-1], means[1:]))
                details.update(mu_hat=mu_hat, fit=asdict(fit), decreasing=decreasing)
                verdict = HOLDS if mu_hat > 0 and decreasing else INCONCLUSIVE
            else:
                verdict = HOLDS if np.all(means == 0) else INCONCLUSIVE
        if not all(r[-1] for r in rows):
            verdict = INCONCLUSIVE
        return EstimateReport(f"check_discounted_whole_space[{variant}]", ineq, ests[0].as_dict(), None,
                              "fitted", fitted, verdict, meta, details,
                              {"discounted": _table(["abs_x", "lhs", "ci_low", "ci_high",
                                                     "truncation_bound", "truncation_ok"], rows)})

    lam_grid = sorted(float(v) for v in lam_grid)
    if R0 is None:
        R0 = _ledger_for(model, assumed_N_d).R
    ratios = []
    trunc_ok = True
    zero = f.is_zero
    for i, lam in enumerate(lam_grid):
        s = 1.0 / math.sqrt(lam)
        f_l = f.dilated(s, time=parabolic)
        R_l = R * s
        cfg = config.replace(path_offset=config.path_offset + i * config.n_paths)
        if scale_h:
            cfg = cfg.replace(time_step_h=config.time_step_h / lam, max_time=config.max_time / lam)
        if wkind == "psi":
            w = WeightFunction("psi", lam, mu)
        elif wkind == "psi_R":
            w = WeightFunction("psi_R", lam, mu, R_l, R0)
        else:
            w = WeightFunction("phi", lam, mu)
        if zero:
            est = Estimate(0.0, 0.0, cfg.n_paths, 0.0, 0.0, 0.0)
            norm, bound, ok = 0.0, 0.0, True
        else:
            est, bound, ok, _ = _discounted_lhs(model, f_l, x0 * s, density, discount, lam, cfg, workers,
                                                radius_out=R_l)
            t_range = None
            if parabolic:
                t_range = (0.0, math.inf) if wkind == "phi" else None
            norm = lp_norm(f_l, Domain.whole(d), p, weight=w, t_range=t_range)
        trunc_ok &= ok
        ratio = est.mean / norm if norm > 0 else 0.0
        ratios.append(ratio)
        rows.append([lam, est.mean, est.ci_low, est.ci_high, norm, ratio, bound, int(ok)])
    expected = expo(d, p)
    details = {"expected_exponent": expected}
    if zero:
        verdict = HOLDS
        fitted = 0.0
        details["exponent"] = None
    else:
        fit = linear_fit(np.log(lam_grid), np.log(ratios))
        details.update(exponent=fit.slope, fit=asdict(fit))
        if variant == "annulus":
            ann = (R + R0) ** (2 - d / p)
            details["annulus_factor"] = ann
        fitted = max(r / lam**expected for r, lam in zip(ratios, lam_grid))
        verdict = HOLDS if abs(fit.slope - expected) <= tolerance and trunc_ok else INCONCLUSIVE
    return EstimateReport(f"check_discounted_whole_space[{variant}]", ineq,
                          {"mean": rows[0][1], "ci_low": rows[0][2], "ci_high": rows[0][3]}, None,
                          "fitted", fitted, verdict, meta, details,
                          {"discounted": _table(["lambda", "lhs", "ci_low", "ci_high", "weighted_norm", "ratio",
                                                 "truncation_bound", "truncation_ok"], rows)})


# --------------------------------------------------------- lower occupation


def check_lower_occupation(model: ProcessModel, R_grid: Sequence[float] = (1.0, 2.0, 4.0), kappa: float = 0.0,
                           eps: float = 1.0, config: SimConfig = SimConfig(), spread: float = 2.0,
                           max_censored: float = 1e-3, scale_h: bool = True, workers=None) -> EstimateReport:
    """Lower bounds on time spent before exit, uniformly in ``R``.

    For each ``R``: ``E phi_tau / R^2``, ``E tau / R^2`` from ``|x| = kappa R``,
    and ``E int_0^{tau ^ eps R^2} e^-t dt / min(R^2, 1)``.  Holds when all
    three are positive beyond CI and ``E tau / R^2`` varies by at most
    ``spread`` over ``R_grid``.
    """
    if model.ellipticity is None:
        raise ValueError("lower occupation checks need a uniformly elliptic model")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if not 0 <= kappa < 1:
        raise ValueError("kappa must lie in [0, 1)")
    d = model.d
    rows = []
    vals = {"phi": [], "tau": [], "disc": []}
    cens_max = 0.0
    for i, R in enumerate(R_grid):
        xs = (kappa * R,) + (0.0,) * (d - 1)
        cfg = config.replace(path_offset=config.path_offset + 2 * i * config.n_paths)
        if scale_h:
            cfg = cfg.replace(time_step_h=config.time_step_h * R * R, max_time=config.max_time * R * R)
        st = run_ensemble(model, Domain.ball(R, d, start=xs), FunctionalSpec.of(Phi()), cfg, workers=workers)
        if st.censored_fraction > max_censored:
            st = run_ensemble(model, Domain.ball(R, d, start=xs), FunctionalSpec.of(Phi()),
                              cfg.replace(max_time=4 * cfg.max_time), workers=workers)
        cens_max = max(cens_max, st.censored_fraction)
        ephi = st.estimate("phi")
        etau = st.estimate("tau")
        T = eps * R * R
        cfg2 = cfg.replace(path_offset=cfg.path_offset + config.n_paths,
                           time_step_h=min(cfg.time_step_h, T / 20), max_time=max(cfg.max_time, 2 * T))
        one = Occupation(ScalarField.constant(d), "one", "t", 1.0)
        s2 = run_ensemble(model, Domain.cylinder(T, R, d, start=xs), FunctionalSpec.of(one), cfg2,
                          workers=workers)
        edisc = s2.estimate("occ[one,t]")
        r2 = R * R
        m = min(r2, 1.0)
        vals["phi"].append(ephi.ci_low / r2)
        vals["tau"].append(etau.mean / r2)
        vals["disc"].append(edisc.ci_low / m)
        rows.append([R, ephi.mean / r2, ephi.ci_low / r2, etau.mean / r2, etau.ci_low / r2,
                     edisc.mean / m, edisc.ci_low / m])
    positive = all(v > 0 for k in ("phi", "disc") for v in vals[k]) and all(r[4] > 0 for r in rows)
    nu = min(vals["tau"])
    stable = max(vals["tau"]) <= spread * nu
    verdict = HOLDS if positive and stable and cens_max <= max_censored else INCONCLUSIVE
    return EstimateReport(
        "check_lower_occupation", "N E phi_tau_R >= R^2; E tau_R >= nu R^2; N E int_0^{tau ^ eps R^2} e^-t dt >= R^2 ^ 1",
        {"mean": rows[0][1], "ci_low": rows[0][2], "ci_high": math.nan}, None, "fitted", nu, verdict,
        _meta(config, R_grid=list(R_grid), kappa=kappa, eps=eps, scenario=model.name),
        {"nu_hat": nu, "stable": stable, "censored_fraction": cens_max},
        {"lower_occupation": _table(["R", "phi_over_R2", "phi_ci_low", "tau_over_R2", "tau_ci_low",
                                     "discounted_over_min_R2_1", "discounted_ci_low"], rows)})


# ---------------------------------------------------------- counterexample


def counterexample_sweep(eps_list: Sequence[float] = (1e-1, 1e-2, 1e-3), p_list: Sequence[float] = (1.5, 2.0),
                         config: SimConfig = SimConfig(), d: int = 2, ratio_factor: float = 1.5,
                         tolerance: float = 0.05, norm_variation: float = 0.05, slope_tolerance: float = 0.15,
                         oracle_n: int = 4000, paths: Optional[Sequence[int]] = None,
                         workers=None) -> EstimateReport:
    """Drift ``-(d/2) x |x|^-2`` on ``eps < |x| < 1``: bounded ``L_p`` norms for ``p < d``
    but an unbounded occupation ``E psi_tau`` from the origin.

    For each ``eps`` the Monte Carlo value of ``E psi`` at the exit from
    ``B_1`` is compared with a radial finite-difference solve.  The sweep
    holds when the two agree within ``tolerance``, the reference values
    increase strictly as ``eps`` decreases with last/first above
    ``ratio_factor``, the ``L_p`` norms for ``p < d`` vary by less than
    ``norm_variation``, and ``log ||b_eps||_{L_d}`` grows like ``(1/2) log
    log(1/eps)`` within ``slope_tolerance``.  ``paths`` overrides the path
    count per ``eps``.
    """
    from .catalog import catalog

    if d != 2:
        raise ValueError("the sweep is defined in d = 2")
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list[:-1], eps_list[1:])):
        raise ValueError("eps_list must be decreasing")
    if any(not 1 < p <= d for p in p_list):
        raise ValueError("p_list must lie in (1, d]")
    rows = []
    agree = True
    oracle_vals = []
    norms = {p: [] for p in p_list}
    for i, eps in enumerate(eps_list):
        model = catalog("counterexample-ε", d=d, eps=eps)
        n = paths[i] if paths is not None else config.n_paths
        cfg = config.replace(n_paths=n, batch_count=max(2, min(config.batch_count, n)),
                             path_offset=config.path_offset + i * 10**7)
        st = run_ensemble(model, Domain.ball(1.0, d), FunctionalSpec(), cfg, workers=workers)
        e = st.estimate("psi")
        ref = counterexample_oracle(eps, d=d, n=oracle_n)
        oracle_vals.append(ref)
        rel = abs(e.mean - ref) / ref
        agree &= rel <= tolerance
        mag = ScalarField.power(d, d / 2.0, 1.0, eps, 1.0)
        row = [eps, e.mean, e.ci_low, e.ci_high, ref, rel, float(st.steps.mean())]
        for p in p_list:
            v = lp_norm(mag, Domain.ball(1.0, d), p)
            norms[p].append(v)
            row.append(v)
        rows.append(row)
    increasing = all(b > a for a, b in zip(oracle_vals[:-1], oracle_vals[1:]))
    ratio = oracle_vals[-1] / oracle_vals[0]
    norm_checks = {}
    for p in p_list:
        vals = np.array(norms[p])
        if p < d:
            var = vals.max() / vals.min() - 1
            norm_checks[str(p)] = {"variation": var, "ok": bool(var < norm_variation)}
        else:
            fit = linear_fit(np.log(np.log(1 / np.array(eps_list))), np.log(vals))
            norm_checks[str(p)] = {"slope": fit.slope, "ok": bool(abs(fit.slope - 0.5) <= slope_tolerance * 0.5)}
    shape_ok = increasing and ratio > ratio_factor and all(v["ok"] for v in norm_checks.values())
    verdict = HOLDS if shape_ok and agree else INCONCLUSIVE
    return EstimateReport(
        "counterexample_sweep", "E int_0^tau_1 det(a)^(1/d) dt unbounded while ||b_eps||_{L_p}, p < d, stays bounded",
        None, None, "oracle", ratio, verdict,
        _meta(config, eps_list=eps_list, p_list=list(p_list)),
        {"oracle_values": oracle_vals, "increasing": increasing, "ratio": ratio, "mc_agrees": agree,
         "discretization_failure": not agree, "norm_checks": norm_checks},
        {"counterexample": _table(["eps", "mc", "ci_low", "ci_high", "oracle", "relative_error",
                                   "steps_per_path"] + [f"norm_L{p:g}" for p in p_list], rows)})


def battery_fitted_N(reports: Sequence[EstimateReport], checker: str = "check_elliptic_aleksandrov"):
    """Largest fitted constant over scenarios for one checker, with the scenario attaining it."""
    best = (None, None)
    for r in reports:
        if r.checker == checker and r.fitted is not None:
            if best[0] is None or r.fitted > best[0]:
                best = (r.fitted, r.metadata.get("scenario"))
    return best
