"""Explicit constants derived from an assumed dimensional constant ``N_d``.

Given ``d``, the envelope norm ``B = ||env||_{L_d}`` and ``N_d``:

* ``N_{d,B} = N_d / d + N_d^2 / d * (B/d)^(1/d) * exp(N_d (B/d)^d)``
* ``(k, n)`` with ``(1/cosh 1 + N_{d,B} B / k^(1/d))^(n-k) <= 1/2``, and ``R = 2(n+1)``
* ``t0 = ln(3/2) / R^2``, ``beta = ln(2)^2 / (4 R^2)``, ``N_tail = R / ln 2``, ``rho = 3 + 2R``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

SECH1 = 1.0 / math.cosh(1.0)


class InfeasibleLedger(ValueError):
    pass


@dataclass(frozen=True)
class ConstantLedger:
    d: int
    norm_b: float
    assumed_N_d: float
    N_db: float
    k: int
    n: int
    base: float
    R: float
    t0: float
    beta: float
    N_tail: float
    rho: float
    recipe: str

    def as_dict(self):
        return asdict(self)


def n_db(d, norm_b, N_d):
    s = norm_b / d
    return N_d / d + N_d * N_d / d * s ** (1.0 / d) * math.exp(N_d * s**d)


def _base(k, A, d):
    return SECH1 + A / k ** (1.0 / d)


def _m_for(base):
    # least m >= 0 with base^m <= 1/2
    if base >= 1:
        return math.inf
    m = math.ceil(math.log(0.5) / math.log(base) - 1e-12)
    while base**m > 0.5:
        m += 1
    while m > 0 and base ** (m - 1) <= 0.5:
        m -= 1
    return m


def _k_for(m, A, d):
    # least k >= 1 with (SECH1 + A / k^(1/d))^m <= 1/2
    target = 0.5 ** (1.0 / m)
    if target <= SECH1:
        return math.inf
    if A == 0:
        return 1
    k = max(1, math.ceil((A / (target - SECH1)) ** d - 1e-9))
    while k > 1 and _base(k - 1, A, d) ** m <= 0.5:
        k -= 1
    while _base(k, A, d) ** m > 0.5:
        k += 1
    return k


def choose_kn(d, A, recipe="min-n", k_cap=10**15):
    """Pick ``(k, n)`` for the product ``A = N_{d,B} B``.

    ``"min-n"`` minimizes ``n = k + m`` over every feasible ``k``, which makes
    ``n`` nondecreasing in ``A``.  ``"min-k"`` takes the least ``k`` with a
    base below one and then the least ``n``.
    """
    if recipe == "min-k":
        k_lo = 1 if A == 0 else math.floor((A / (1 - SECH1)) ** d) + 1
        while k_lo > 1 and _base(k_lo - 1, A, d) < 1:
            k_lo -= 1
        while _base(k_lo, A, d) >= 1:
            k_lo += 1
        if k_lo > k_cap:
            raise InfeasibleLedger(f"no k <= {k_cap} gives a base below 1 (N*B = {A!r})")
        m = _m_for(_base(k_lo, A, d))
        return k_lo, k_lo + m
    if recipe != "min-n":
        raise ValueError("recipe must be 'min-n' or 'min-k'")
    k_inf = 1 if A == 0 else max(1, math.ceil((A / (1 - SECH1)) ** d - 1e-9))
    if k_inf > k_cap:
        raise InfeasibleLedger(f"no k <= {k_cap} gives a base below 1 (N*B = {A!r})")
    best = None
    m = 1
    while best is None or m + k_inf < best[1]:
        k = _k_for(m, A, d)
        if math.isfinite(k) and (best is None or k + m < best[1]):
            best = (int(k), int(k + m))
        m += 1
        if m > 10**7:
            raise InfeasibleLedger("search for n did not terminate")
    return best


def ledger(d: int, norm_b: float, assumed_N_d: float = 1.0, recipe: str = "min-n") -> ConstantLedger:
    if not assumed_N_d > 0:
        raise ValueError("assumed N_d must be positive")
    if not (norm_b >= 0 and math.isfinite(norm_b)):
        raise ValueError("envelope norm must be finite and nonnegative")
    N = n_db(d, norm_b, assumed_N_d)
    A = N * norm_b
    k, n = choose_kn(d, A, recipe)
    R = 2.0 * (n + 1)
    return ConstantLedger(
        d=d, norm_b=norm_b, assumed_N_d=assumed_N_d, N_db=N, k=k, n=n,
        base=_base(k, A, d), R=R, t0=math.log(1.5) / R**2,
        beta=math.log(2) ** 2 / (4 * R**2), N_tail=R / math.log(2), rho=3 + 2 * R,
        recipe=recipe)
