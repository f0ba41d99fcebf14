"""Built-in scenario catalog backed by ``data/scenarios.yaml``."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np
import yaml

from . import coefficients as co
from .model import DriftEnvelope, ProcessModel


class UnknownScenario(KeyError):
    pass


@lru_cache(maxsize=1)
def manifest() -> dict:
    text = resources.files("ldlab").joinpath("data/scenarios.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def scenario_names(include_aliases=False) -> list:
    names = []
    for name, entry in manifest()["scenarios"].items():
        names.append(name)
        if include_aliases:
            names.extend(entry.get("aliases", []))
    return names


def canonical_name(name: str) -> str:
    for key, entry in manifest()["scenarios"].items():
        if name == key or name in entry.get("aliases", []):
            return key
    raise UnknownScenario(f"unknown scenario {name!r}; valid names: {', '.join(scenario_names(True))}")


def defaults(name: str) -> dict:
    return dict(manifest()["scenarios"][canonical_name(name)]["params"])


def catalog(name: str, **overrides) -> ProcessModel:
    """Build a catalog model, e.g. ``catalog("counterexample-eps", eps=0.01)``."""
    key = canonical_name(name)
    params = defaults(key)
    unknown = set(overrides) - set(params)
    if unknown:
        raise ValueError(f"scenario {key!r} has no parameters {sorted(unknown)}; known: {sorted(params)}")
    params.update(overrides)
    return _BUILDERS[key](params)


def _eye(d):
    return np.eye(d)


def _standard(p):
    d = int(p["d"])
    return ProcessModel.constant(_eye(d), ellipticity=0.5, name="standard-bm", params=p)


def _isotropic(p):
    d, c = int(p["d"]), float(p["c"])
    ev = 0.5 * c * c
    delta = min(ev, 1.0 / ev)
    ell = delta if delta < 1 else None
    return ProcessModel.constant(c * _eye(d), ellipticity=ell, name="isotropic-scaled", params=p)


def _anisotropic(p):
    d, delta = int(p["d"]), float(p["delta"])
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    ev = np.ones(d)
    ev[0], ev[1] = delta, 1.0 / delta
    sigma = np.diag(np.sqrt(2.0 * ev))
    return ProcessModel.constant(sigma, ellipticity=delta, name="anisotropic-Sδ", params=p)


def _radial_drift(d, c, alpha, r_lo, r_hi):
    dp = np.zeros(7)
    dp[:4] = c, alpha, r_lo, r_hi
    return dp


def _singular(p):
    d, alpha, c = int(p["d"]), float(p["alpha"]), float(p["c"])
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1) for an L_d envelope")
    # det(I/2)^(1/d) = 1/2, so the envelope is twice the drift magnitude
    env = DriftEnvelope.radial(d, 2.0 * c, alpha, 0.0, 1.0)
    base = ProcessModel.constant(_eye(d), ellipticity=0.5)
    return base.with_drift(co.DRIFT_RADIAL, _radial_drift(d, c, alpha, 0.0, 1.0), env,
                           name="singular-drift-α", params=p)


def _counterexample(p):
    d, eps = int(p["d"]), float(p["eps"])
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    env = DriftEnvelope.radial(d, float(d), 1.0, eps, 1.0)
    base = ProcessModel.constant(_eye(d), ellipticity=0.5)
    return base.with_drift(co.DRIFT_RADIAL, _radial_drift(d, d / 2.0, 1.0, eps, 1.0), env,
                           name="counterexample-ε", params=p)


def _degenerate(p):
    d, r = int(p["d"]), float(p["r_flat"])
    inner = np.zeros((d, d))
    inner[0, 0] = 1.0
    sp = np.zeros(4 + 2 * d * d)
    sp[3] = r
    sp[4:4 + d * d] = inner.ravel()
    sp[4 + d * d:] = _eye(d).ravel()
    return ProcessModel(d=d, sigma_kind=co.SIGMA_SWITCH, sigma_params=sp,
                        drift_kind=co.DRIFT_ZERO, drift_params=np.zeros(1),
                        envelope=DriftEnvelope.zero(d), ellipticity=None,
                        nondegenerate_at_infinity=True, name="degenerate-rank", params=p)


_BUILDERS = {
    "standard-bm": _standard,
    "isotropic-scaled": _isotropic,
    "anisotropic-Sδ": _anisotropic,
    "singular-drift-α": _singular,
    "counterexample-ε": _counterexample,
    "degenerate-rank": _degenerate,
}


def describe_all() -> str:
    lines = []
    for name, entry in manifest()["scenarios"].items():
        alias = entry.get("aliases", [])
        head = name + (f" (alias: {', '.join(alias)})" if alias else "")
        params = ", ".join(f"{k}={v}" for k, v in entry["params"].items())
        lines.append(f"{head}\n    {entry['description']}\n    parameters: {params}")
    return "\n".join(lines)


def isotropic(model: ProcessModel) -> bool:
    """True when ``a`` is a scalar matrix everywhere (constant-coefficient check)."""
    if model.sigma_kind != co.SIGMA_CONST:
        return False
    s = model.sigma_params.reshape(model.d, model.d)
    a = 0.5 * s @ s.T
    return bool(np.allclose(a, a[0, 0] * np.eye(model.d), rtol=1e-12, atol=0))


__all__ = ["catalog", "scenario_names", "canonical_name", "describe_all", "manifest",
           "UnknownScenario", "isotropic"]
