"""Ensemble simulation of Ito processes and their path functionals.

The heavy lifting happens in :func:`ldlab._kernel.run_block`; this module
translates models, domains and functional requests into its flat encoding,
farms fixed-size blocks of path indices out to worker processes, and
reduces the per-path arrays in index order.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import _kernel as K
from . import coefficients as co
from .model import Domain, ProcessModel, ScalarField
from .rng import split_seed

WORKERS_ENV = "LDLAB_WORKERS"
BLOCK = 1024

DENSITIES = {"det_d": K.DENS_DET_D, "det_d1": K.DENS_DET_D1, "one": K.DENS_ONE}
DISCOUNTS = {"none": K.DISC_NONE, "phi": K.DISC_PHI, "t_phi": K.DISC_T_PHI,
             "phi_out": K.DISC_PHI_OUT, "t": K.DISC_T}
STATUS_NAMES = {K.EXITED: "exited", K.CENSORED: "censored", K.TRUNCATED: "truncated",
                K.INVALID: "invalid", K.STOPPED: "stopped"}


class EnsembleError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Discretization and sampling settings.

    ``drift_clip_length`` caps ``|b| h`` per step (default one tenth of the
    domain radius, or 0.1 in whole space).  ``step_kappa > 0`` switches on
    local step refinement ``h_k = min(h, (kappa * l(x))^2)`` where ``l`` is
    the drift's length scale, floored at ``step_floor``.  ``noise_substeps``
    builds each increment from that many finer blocks so runs with
    different ``h`` share their Brownian path.
    """

    time_step_h: float = 1e-3
    max_time: float = 50.0
    exit_correction: str = "brownian-bridge"
    drift_clip_length: Optional[float] = None
    master_seed: int = 12345
    n_paths: int = 10_000
    batch_count: int = 20
    ci_level: float = 0.95
    step_kappa: float = 0.0
    step_floor: float = 1e-4
    noise_substeps: int = 1
    discount_cutoff: float = 1e-12
    path_offset: int = 0

    def __post_init__(self):
        if not 0 < self.time_step_h < self.max_time:
            raise ValueError("need 0 < time_step_h < max_time")
        if self.exit_correction not in ("none", "brownian-bridge"):
            raise ValueError("exit_correction must be 'none' or 'brownian-bridge'")
        if self.drift_clip_length is not None and not self.drift_clip_length > 0:
            raise ValueError("drift_clip_length must be positive")
        if not self.n_paths >= self.batch_count >= 2:
            raise ValueError("need n_paths >= batch_count >= 2")
        if self.noise_substeps < 1:
            raise ValueError("noise_substeps must be >= 1")
        split_seed(self.master_seed)

    def replace(self, **kw) -> "SimConfig":
        d = asdict(self)
        d.update(kw)
        return SimConfig(**d)


# ------------------------------------------------------------ requests


@dataclass(frozen=True)
class Psi:
    key = "psi"


@dataclass(frozen=True)
class Phi:
    key = "phi"


@dataclass(frozen=True)
class PhiOutside:
    radius: float

    @property
    def key(self):
        return "phi_out"


@dataclass(frozen=True)
class Occupation:
    """``int f(t, x_t) * density * discount dt`` up to the stopping time."""

    field: ScalarField
    density: str = "det_d"
    discount: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.density not in DENSITIES:
            raise ValueError(f"density must be one of {sorted(DENSITIES)}")
        if self.discount not in DISCOUNTS:
            raise ValueError(f"discount must be one of {sorted(DISCOUNTS)}")

    @property
    def key(self):
        return f"occ[{self.density},{self.discount}]"


@dataclass(frozen=True)
class MaxDisplacement:
    key = "max_disp"


@dataclass(frozen=True)
class TargetSet:
    """Finite union of closed balls and annuli, each active on a time window."""

    shapes: tuple  # (kind, r_in, r_out, center, t_lo, t_hi)

    @classmethod
    def ball(cls, r, center, t_lo=0.0, t_hi=math.inf):
        return cls(((co.SHAPE_BALL, 0.0, float(r), tuple(center), t_lo, t_hi),))

    @classmethod
    def annulus(cls, r_in, r_out, center, t_lo=0.0, t_hi=math.inf):
        return cls(((co.SHAPE_ANNULUS, float(r_in), float(r_out), tuple(center), t_lo, t_hi),))

    def __or__(self, other):
        return TargetSet(self.shapes + other.shapes)

    def encode(self, d):
        out = np.zeros(1 + co.SHAPE_WIDTH * max(1, len(self.shapes)))
        out[0] = len(self.shapes)
        for k, (kind, r_in, r_out, c, t_lo, t_hi) in enumerate(self.shapes):
            rec = out[1 + k * co.SHAPE_WIDTH:1 + (k + 1) * co.SHAPE_WIDTH]
            rec[:5] = kind, t_lo, t_hi, r_in, r_out
            rec[5:5 + d] = c
        return out


@dataclass(frozen=True)
class Hitting:
    target: TargetSet
    stop: bool = True

    @property
    def key(self):
        return "hit"


@dataclass(frozen=True)
class FunctionalSpec:
    """Accumulator requests for one ensemble run.

    The kernel carries one occupation field and one discount rate per run;
    any number of density/discount combinations of that field may be
    requested together.
    """

    requests: tuple = ()

    def __post_init__(self):
        occ = [r for r in self.requests if isinstance(r, Occupation)]
        if len({r.field.encode().tobytes() for r in occ}) > 1:
            raise ValueError("all occupation requests in one run must share the field")
        if len({r.lam for r in occ if r.discount != "none"}) > 1:
            raise ValueError("all discounted requests in one run must share lambda")
        if len([r for r in self.requests if isinstance(r, PhiOutside)]) > 1:
            raise ValueError("at most one phi_outside radius per run")
        if len([r for r in self.requests if isinstance(r, Hitting)]) > 1:
            raise ValueError("at most one target set per run")

    @classmethod
    def of(cls, *requests):
        return cls(tuple(requests))

    def keys(self):
        keys = ["tau", "psi", "phi"]
        for r in self.requests:
            if r.key not in keys:
                keys.append(r.key)
        return keys


# ---------------------------------------------------------------- results


@dataclass
class PathResult:
    path_index: int
    exit_time: float
    status: str
    exit_position: np.ndarray
    values: dict
    steps: int
    clip_events: int

    @property
    def censored(self) -> bool:
        return self.status == "censored"


@dataclass
class Estimate:
    mean: float
    std: float
    n: int
    ci_low: float
    ci_high: float
    batch_ci_halfwidth: float

    @property
    def halfwidth(self):
        return 0.5 * (self.ci_high - self.ci_low)

    def as_dict(self):
        return {k: float(v) if isinstance(v, float) else v for k, v in asdict(self).items()}


@dataclass
class EnsembleStats:
    """Per-path arrays plus CLT summaries for every requested functional."""

    config: SimConfig
    keys: list
    samples: dict
    status: np.ndarray
    exit_position: np.ndarray
    steps: np.ndarray
    clip_events: np.ndarray
    estimates: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return len(self.status)

    @property
    def valid(self):
        return self.status != K.INVALID

    def count(self, name):
        code = {v: k for k, v in STATUS_NAMES.items()}[name]
        return int(np.sum(self.status == code))

    @property
    def censored_fraction(self):
        return self.count("censored") / self.n_paths

    def estimate(self, key, transform=None) -> Estimate:
        x = self.samples[key][self.valid]
        if transform is not None:
            x = transform(x)
        return summarize(x, self.config.batch_count, self.config.ci_level)

    def tail(self, key, thresholds, upper=True):
        """Empirical ``P(X >= s)`` (or ``P(X <= s)``) with exceedance counts."""
        x = self.samples[key][self.valid]
        s = np.asarray(thresholds, dtype=float)
        if upper:
            cnt = np.sum(x[None, :] >= s[:, None], axis=1)
        else:
            cnt = np.sum(x[None, :] <= s[:, None], axis=1)
        return cnt / len(x), cnt

    def path(self, i) -> PathResult:
        return PathResult(
            path_index=self.config.path_offset + i,
            exit_time=float(self.samples["tau"][i]),
            status=STATUS_NAMES[int(self.status[i])],
            exit_position=self.exit_position[i].copy(),
            values={k: float(v[i]) for k, v in self.samples.items()},
            steps=int(self.steps[i]), clip_events=int(self.clip_events[i]))

    def summary(self) -> dict:
        out = {"n_paths": self.n_paths,
               "status_counts": {n: self.count(n) for n in STATUS_NAMES.values()},
               "clip_events": int(self.clip_events.sum()),
               "steps": int(self.steps.sum())}
        out["estimates"] = {k: self.estimate(k).as_dict() for k in self.keys
                            if np.all(np.isfinite(self.samples[k][self.valid]))}
        return out

    def dump(self, fh, columns=None):
        """Write the per-path dump: whitespace separated, one path per line."""
        columns = columns or self.keys
        fh.write("# path seed status steps clips " + " ".join(columns) + "\n")
        for i in range(self.n_paths):
            vals = " ".join(repr(float(self.samples[c][i])) for c in columns)
            fh.write(f"{self.config.path_offset + i} {self.config.master_seed} "
                     f"{STATUS_NAMES[int(self.status[i])]} {int(self.steps[i])} "
                     f"{int(self.clip_events[i])} {vals}\n")


def summarize(x, batch_count=20, level=0.95) -> Estimate:
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n == 0:
        return Estimate(math.nan, math.nan, 0, math.nan, math.nan, math.nan)
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    z = float(stats.norm.ppf(0.5 + 0.5 * level))
    hw = z * sd / math.sqrt(n)
    bc = min(batch_count, n)
    if bc >= 2:
        bm = np.array([b.mean() for b in np.array_split(x, bc)])
        tq = float(stats.t.ppf(0.5 + 0.5 * level, bc - 1))
        bhw = tq * float(np.std(bm, ddof=1)) / math.sqrt(bc)
    else:
        bhw = math.nan
    return Estimate(mean, sd, n, mean - hw, mean + hw, bhw)


# ---------------------------------------------------------------- encoding


def _encode(model: ProcessModel, domain: Domain, fs: FunctionalSpec, cfg: SimConfig):
    d = model.d
    if domain.d != d:
        raise ValueError("domain and model dimensions differ")
    if not domain.contains(domain.start):
        raise ValueError("start point must lie inside the domain")
    icfg = np.zeros(K.N_ICFG, dtype=np.int64)
    fcfg = np.zeros(K.N_FCFG)
    icfg[K.I_D] = d
    icfg[K.I_SIGMA] = model.sigma_kind
    icfg[K.I_DRIFT] = model.drift_kind
    icfg[K.I_DOMAIN] = {"ball": K.DOM_BALL, "half-space-time": K.DOM_BALL,
                        "cylinder": K.DOM_CYLINDER, "whole": K.DOM_WHOLE}[domain.kind]
    icfg[K.I_BRIDGE] = cfg.exit_correction == "brownian-bridge"
    icfg[K.I_SUBSTEPS] = cfg.noise_substeps
    mask = 0
    dmask = 0
    lam = 0.0
    rout = 0.0
    fld = ScalarField.zero(d).encode()
    hit = np.zeros(1 + co.SHAPE_WIDTH)
    occ_req = []
    for r in fs.requests:
        if isinstance(r, Occupation):
            mask |= K.WANT_OCC
            fld = r.field.encode()
            occ_req.append(K.occ_slot(DENSITIES[r.density], DISCOUNTS[r.discount]) - K.ACC_OCC)
            if r.discount != "none":
                dmask |= 1 << DISCOUNTS[r.discount]
                lam = r.lam
        elif isinstance(r, PhiOutside):
            mask |= K.WANT_PHI_OUT
            rout = r.radius
        elif isinstance(r, MaxDisplacement):
            mask |= K.WANT_MAXDISP
        elif isinstance(r, Hitting):
            mask |= K.WANT_HIT
            hit = r.target.encode(d)
            icfg[K.I_STOP_HIT] = r.stop
    if dmask & (1 << K.DISC_PHI_OUT):
        mask |= K.WANT_PHI_OUT
    icfg[K.I_MASK] = mask
    icfg[K.I_DMASK] = dmask
    R = domain.R if domain.kind != "whole" else math.inf
    clip = cfg.drift_clip_length
    if clip is None:
        clip = 0.1 * R if math.isfinite(R) else 0.1
    fcfg[K.F_H] = cfg.time_step_h
    fcfg[K.F_TMAX] = cfg.max_time
    fcfg[K.F_CLIP] = clip
    fcfg[K.F_KAPPA] = cfg.step_kappa
    fcfg[K.F_FLOOR] = cfg.step_floor
    fcfg[K.F_RADIUS] = R
    fcfg[K.F_T] = domain.T
    fcfg[K.F_LAMBDA] = lam
    fcfg[K.F_ROUT] = rout
    fcfg[K.F_TRUNC] = cfg.discount_cutoff
    x0 = np.asarray(domain.start, dtype=float)
    center = np.asarray(domain.center, dtype=float)
    return (icfg, fcfg, x0, center, np.asarray(model.sigma_params, dtype=float),
            np.asarray(model.drift_params, dtype=float), fld, hit,
            np.array(sorted(set(occ_req)), dtype=np.int64))


def _run_chunk(args):
    first, count, key0, key1, enc = args
    icfg = enc[0]
    d = int(icfg[K.I_D])
    tau = np.empty(count)
    status = np.empty(count, dtype=np.int64)
    xexit = np.empty((count, d))
    acc = np.empty((count, K.N_ACC))
    steps = np.empty(count, dtype=np.int64)
    clips = np.empty(count, dtype=np.int64)
    K.run_block(np.uint64(first), count, key0, key1, *enc, tau, status, xexit, acc, steps, clips)
    return first, tau, status, xexit, acc, steps, clips


def default_workers() -> int:
    v = os.environ.get(WORKERS_ENV)
    if v:
        return max(1, int(v))
    return 1


def _columns(fs: FunctionalSpec):
    cols = {"tau": None, "psi": K.ACC_PSI, "phi": K.ACC_PHI}
    for r in fs.requests:
        if isinstance(r, Occupation):
            cols[r.key] = K.occ_slot(DENSITIES[r.density], DISCOUNTS[r.discount])
        elif isinstance(r, PhiOutside):
            cols["phi_out"] = K.ACC_PHI_OUT
        elif isinstance(r, MaxDisplacement):
            cols["max_disp"] = K.ACC_MAXDISP
        elif isinstance(r, Hitting):
            cols["hit_time"] = K.ACC_HIT
            cols["hit"] = K.ACC_HIT
    return cols


def run_ensemble(model: ProcessModel, domain: Domain, functionals: FunctionalSpec,
                 config: SimConfig, workers: Optional[int] = None,
                 max_invalid_fraction: float = 0.01) -> EnsembleStats:
    """Simulate ``config.n_paths`` paths and reduce them in index order.

    The path range is cut into blocks of fixed size; blocks are simulated
    by ``workers`` processes (``LDLAB_WORKERS`` by default) and written back
    by index, so results never depend on the worker count.
    """
    enc = _encode(model, domain, functionals, config)
    key0, key1 = split_seed(config.master_seed)
    n = config.n_paths
    d = model.d
    chunks = [(config.path_offset + s, min(BLOCK, n - s), key0, key1, enc) for s in range(0, n, BLOCK)]
    workers = default_workers() if workers is None else max(1, int(workers))
    tau = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    xexit = np.empty((n, d))
    acc = np.empty((n, K.N_ACC))
    steps = np.empty(n, dtype=np.int64)
    clips = np.empty(n, dtype=np.int64)

    if workers == 1 or len(chunks) == 1:
        results = map(_run_chunk, chunks)
        _store(results, config.path_offset, tau, status, xexit, acc, steps, clips)
    else:
        _run_chunk((0, 1, key0, key1, enc))  # compile before forking
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            _store(ex.map(_run_chunk, chunks), config.path_offset, tau, status, xexit, acc, steps, clips)

    samples = {}
    for key, col in _columns(functionals).items():
        if col is None:
            samples[key] = tau
        elif key == "hit":
            samples[key] = np.isfinite(acc[:, col]).astype(float)
        else:
            samples[key] = acc[:, col].copy()
    out = EnsembleStats(config=config, keys=list(samples), samples=samples, status=status,
                        exit_position=xexit, steps=steps, clip_events=clips)
    bad = out.count("invalid")
    if bad > max_invalid_fraction * n:
        raise EnsembleError(f"{bad} of {n} paths invalid (non-finite state); "
                            f"first at index {int(np.flatnonzero(status == K.INVALID)[0])}")
    for rec in _AUDITS:
        rec.add(model, config, out)
    return out


def _store(results, offset, tau, status, xexit, acc, steps, clips):
    for first, t, s, x, a, st, c in results:
        i = int(first) - offset
        j = i + len(t)
        tau[i:j] = t
        status[i:j] = s
        xexit[i:j] = x
        acc[i:j] = a
        steps[i:j] = st
        clips[i:j] = c


def simulate_path(model: ProcessModel, domain: Domain, functionals: FunctionalSpec,
                  config: SimConfig, path_index: int) -> PathResult:
    """One path; identical to entry ``path_index`` of any ensemble with this seed."""
    cfg = config.replace(path_offset=int(path_index), n_paths=max(2, config.batch_count), batch_count=2)
    enc = _encode(model, domain, functionals, cfg)
    key0, key1 = split_seed(cfg.master_seed)
    first, tau, status, xexit, acc, steps, clips = _run_chunk((int(path_index), 1, key0, key1, enc))
    values = {"tau": float(tau[0])}
    for key, col in _columns(functionals).items():
        if col is None:
            continue
        v = float(acc[0, col])
        values[key] = float(math.isfinite(v)) if key == "hit" else v
    return PathResult(int(path_index), float(tau[0]), STATUS_NAMES[int(status[0])], xexit[0].copy(),
                      values, int(steps[0]), int(clips[0]))


# ---------------------------------------------------------- pathwise audit


@dataclass
class PathwiseAudit:
    """Pathwise ``psi <= phi / d`` over every ensemble run while active.

    A path violates when ``psi - phi / d`` exceeds a floating slack of
    ``1e-9 * (h + phi)``.  For constant scalar ``a`` the gap itself must stay
    within ``1e-9 * phi``; ``isotropic_gap`` records the largest relative gap
    seen on such runs.
    """

    runs: int = 0
    paths: int = 0
    violations: int = 0
    worst_excess: float = -math.inf
    isotropic_runs: int = 0
    isotropic_gap: float = 0.0

    def add(self, model: ProcessModel, config: SimConfig, stats_: "EnsembleStats"):
        ok = stats_.valid
        psi = stats_.samples["psi"][ok]
        phi = stats_.samples["phi"][ok]
        d = model.d
        excess = psi - phi / d
        slack = 1e-9 * (config.time_step_h + phi)
        self.runs += 1
        self.paths += int(ok.sum())
        self.violations += int(np.sum(excess > slack))
        if len(excess):
            self.worst_excess = max(self.worst_excess, float(np.max(excess)))
        if _scalar_diffusion(model) and len(phi):
            self.isotropic_runs += 1
            rel = np.abs(excess) / np.maximum(phi, 1e-300)
            self.isotropic_gap = max(self.isotropic_gap, float(np.max(np.where(phi > 0, rel, 0.0))))


_AUDITS: list = []


@contextmanager
def pathwise_audit():
    """Collect a :class:`PathwiseAudit` over all ensembles run inside the block."""
    rec = PathwiseAudit()
    _AUDITS.append(rec)
    try:
        yield rec
    finally:
        _AUDITS.remove(rec)


def _scalar_diffusion(model: ProcessModel) -> bool:
    if model.sigma_kind != co.SIGMA_CONST:
        return False
    s = np.asarray(model.sigma_params, dtype=float)
    if s.size != model.d * model.d:
        return False
    s = s.reshape(model.d, model.d)
    a = 0.5 * s @ s.T
    return bool(a[0, 0] > 0 and np.allclose(a, a[0, 0] * np.eye(model.d), rtol=1e-12, atol=0))


# ------------------------------------------------------------ bias order


@dataclass
class BiasOrder:
    h: list
    estimates: list
    increments: list
    increment_halfwidths: list
    limit: float
    order: float
    verdict: str


def bias_order(model, domain, functional, config: SimConfig, h_list: Sequence[float],
               functionals: Optional[FunctionalSpec] = None, reference: Optional[float] = None,
               workers=None) -> BiasOrder:
    """Empirical weak order of ``E functional`` in the step size.

    All runs share their Brownian paths: the finest step fixes the noise
    blocks, and coarser runs sum ``h / h_min`` of them per step.  The order
    comes from the paired increments ``E(h_i) - E(h_{i+1})``, which shrink
    like ``h^q``; the Richardson limit is extrapolated from the last one.
    If ``reference`` is given the order is instead regressed on
    ``|E(h) - reference|``.
    """
    h = sorted(float(v) for v in h_list)[::-1]
    if len(h) < 3:
        raise ValueError("need at least three step sizes")
    ratios = [h[i] / h[i + 1] for i in range(len(h) - 1)]
    if max(ratios) - min(ratios) > 1e-9 * max(ratios):
        raise ValueError("step sizes must be geometrically spaced")
    hmin = h[-1]
    fs = functionals or FunctionalSpec()
    runs = []
    for hi in h:
        m = int(round(hi / hmin))
        if abs(m * hmin - hi) > 1e-9 * hi:
            raise ValueError("step sizes must be integer multiples of the finest")
        st = run_ensemble(model, domain, fs, config.replace(time_step_h=hi, noise_substeps=m),
                          workers=workers)
        runs.append(st.samples[functional])
    est = [float(np.mean(r)) for r in runs]
    z = float(stats.norm.ppf(0.5 + 0.5 * config.ci_level))
    inc = []
    inc_hw = []
    for a, b in zip(runs[:-1], runs[1:]):
        diff = a - b
        inc.append(float(np.mean(diff)))
        inc_hw.append(z * float(np.std(diff, ddof=1)) / math.sqrt(len(diff)))
    r = ratios[0]
    verdict = "ok"
    if reference is not None:
        err = np.abs(np.array(est) - reference)
        q = float(np.polyfit(np.log(h), np.log(np.maximum(err, 1e-300)), 1)[0])
        limit = float(reference)
    else:
        signs = np.sign(inc)
        resolved = [abs(v) > w for v, w in zip(inc, inc_hw)]
        if not all(resolved) or len(set(signs)) > 1:
            verdict = "inconclusive"
        hs = np.array(h[:-1])
        q = float(np.polyfit(np.log(hs), np.log(np.maximum(np.abs(inc), 1e-300)), 1)[0])
        limit = est[-1] - inc[-1] / (r**q - 1) if q > 0 else math.nan
        if not q > 0:
            verdict = "inconclusive"
    return BiasOrder(h, est, inc, inc_hw, limit, q, verdict)
