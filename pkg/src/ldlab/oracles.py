"""Independent reference values for the Monte Carlo estimators.

Everything here is deterministic: closed forms, exact polynomial algebra,
and small finite-difference solves.  Each oracle comes with a second route
(closed form vs. discretization) exercised by the test suite.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy import integrate, optimize, sparse, special
from scipy.sparse import linalg as spla


# ------------------------------------------------------------ exit times


def exit_time_ball(R, x=0.0, d=2, a_scale=0.5):
    """``E tau`` for the exit of ``sqrt(2 s) w`` from ``B_R`` (``a = s I``)."""
    r2 = float(np.sum(np.square(x)))
    return (R * R - r2) / (2.0 * a_scale * d)


def ball_occupation(r, R=1.0, d=2, x=0.0):
    """``E int_0^tau I_{B_r}(w_t) dt`` for Brownian motion (``a = I/2``) started at ``x``.

    Piecewise radial solution of ``(1/2) Laplace u = -I_{B_r}``, ``u = 0`` on
    ``|y| = R``, matched in value and slope at ``|y| = r``.
    """
    if not 0 < r <= R:
        raise ValueError("need 0 < r <= R")
    rho = float(np.linalg.norm(np.atleast_1d(x)))
    if d == 2:
        outer = lambda s: r * r * math.log(R / s)
    elif d == 3:
        outer = lambda s: (2 * r**3 / 3) * (1 / s - 1 / R)
    else:
        raise ValueError("d must be 2 or 3")
    if rho >= r:
        return outer(rho)
    return outer(r) + (r * r - rho * rho) / d


# ------------------------------------------------------- radial solver


def radial_grid(breaks, R, n, grade=None):
    """Nodes on ``[0, R]`` containing every break point.

    Each segment gets ``n`` intervals; a segment ``[a, b]`` with ``a > 0``
    listed in ``grade`` is graded geometrically away from ``a``.
    """
    cuts = sorted({0.0, R, *[b for b in breaks if 0 < b < R]})
    grade = set(grade or ())
    pts = [0.0]
    for a, b in zip(cuts[:-1], cuts[1:]):
        if a in grade and a > 0:
            seg = a * (b / a) ** np.linspace(0, 1, n + 1)
        else:
            seg = np.linspace(a, b, n + 1)
        pts.extend(seg[1:])
    return np.array(pts)


def radial_fd_solve(d, R, source, drift=None, grid=None, n=4000, breaks=(), grade=()):
    """Solve ``(1/2)(u'' + (d-1) u'/r) + beta(r) u' = -g(r)``, ``u'(0) = 0``, ``u(R) = 0``.

    Finite volumes on the flux form ``(r^(d-1) u')'`` with a centered drift
    term.  ``source`` and ``drift`` are vectorized callables of ``r``.

    Returns
    -------
    r, u : ndarray
        Nodes and nodal values.
    """
    r = radial_grid(breaks, R, n, grade) if grid is None else np.asarray(grid, dtype=float)
    N = len(r) - 1
    g = np.asarray(source(r), dtype=float) * np.ones_like(r)
    beta = np.zeros_like(r) if drift is None else np.asarray(drift(r), dtype=float) * np.ones_like(r)
    rm = 0.5 * (r[:-1] + r[1:])
    hh = np.diff(r)
    flux = rm ** (d - 1) / hh  # face coefficients
    rows, cols, vals = [], [], []
    rhs = np.zeros(N)
    for i in range(N):
        lo = rm[i - 1] if i > 0 else 0.0
        vol = (rm[i] ** d - lo**d) / d  # integral of s^(d-1) over the cell
        diag = 0.0
        # (1/2) div flux
        c = 0.5 * flux[i]
        rows.append(i), cols.append(i + 1), vals.append(c)
        diag -= c
        if i > 0:
            c = 0.5 * flux[i - 1]
            rows.append(i), cols.append(i - 1), vals.append(c)
            diag -= c
            # centered drift: beta u' times the cell volume
            w = beta[i] * vol / (r[i + 1] - r[i - 1])
            rows.append(i), cols.append(i + 1), vals.append(w)
            rows.append(i), cols.append(i - 1), vals.append(-w)
        rows.append(i), cols.append(i), vals.append(diag)
        rhs[i] = -g[i] * vol
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(N, N + 1))[:, :N]
    u = np.zeros(N + 1)
    u[:N] = spla.spsolve(A.tocsc(), rhs)
    return r, u


def counterexample_closed_form(eps, x=0.0):
    """Exact ``u(|x|)`` for ``d = 2`` (used to validate the finite-difference route)."""
    rho = float(np.linalg.norm(np.atleast_1d(x)))
    if rho < eps:
        return 0.5 * math.log(1 / eps) + (eps * eps - rho * rho) / 4
    return 0.25 * (rho * rho - 1) - 0.5 * rho * rho * math.log(rho) - (math.log(eps) - 0.5) * (1 - rho * rho) / 2


def counterexample_oracle(eps, d=2, n=4000, density=0.5):
    """``E int_0^tau det(a)^(1/d) dt`` from 0 for the inward drift of strength ``d/2`` on ``eps < |x| < 1``.

    One-dimensional finite-difference solve of the radial equation with
    the drift ``-(d/2)/r`` on the shell, source ``density``.
    """

    def drift(r):
        return np.where((r > eps) & (r < 1.0), -(d / 2.0) / np.maximum(r, 1e-300), 0.0)

    r, u = radial_fd_solve(d, 1.0, lambda s: density, drift, n=n, breaks=(eps,), grade=(eps,))
    return float(u[0])


# ----------------------------------------------------- psi moments (exact)


def _poly_laplace_inverse(coeffs, d):
    # solve Laplace v = sum c_k rho^(2k) with v polynomial in rho^2 (no constant fixed)
    out = [Fraction(0)] * (len(coeffs) + 1)
    for k, c in enumerate(coeffs):
        out[k + 1] = Fraction(c) / ((2 * k + 2) * (2 * k + d))
    return out


def _poly_eval(coeffs, rho2):
    return sum(c * rho2**k for k, c in enumerate(coeffs))


def psi_moments_ball(n_max, R=1, d=2, a_scale=Fraction(1, 2), x2=0):
    """Exact ``E psi_tau^n`` for ``a = s I`` on ``B_R``, ``n = 1..n_max``.

    ``psi`` accrues at rate ``s`` (``det(a)^(1/d) = s``), and
    ``u_n = E psi^n`` solves ``s Laplace u_n = -n s u_{n-1}``, ``u_0 = 1``,
    ``u_n = 0`` on the sphere: a chain of radial polynomials in ``rho^2``.
    ``x2`` is ``|x|^2`` of the start point.
    """
    s = Fraction(a_scale)
    R2 = Fraction(R) ** 2
    prev = [Fraction(1)]
    out = []
    for n in range(1, n_max + 1):
        rhs = [-n * c for c in prev]  # s Laplace u = -n s u_prev
        u = _poly_laplace_inverse(rhs, d)
        u[0] = -_poly_eval(u, R2)
        out.append(_poly_eval(u, Fraction(x2)))
        prev = u
    return out


def psi_moment_fd(n_max, R=1.0, d=2, n=4000):
    """Same moments by the nested finite-difference route (any ``a = s I``)."""
    r = radial_grid((), R, n)
    prev = np.ones_like(r)
    out = []
    for k in range(1, n_max + 1):
        # s Laplace u_k = -k s u_{k-1}; the scale s cancels
        src = 0.5 * k * prev
        _, u = radial_fd_solve(d, R, lambda s, v=src: np.interp(s, r, v), grid=r)
        out.append(float(u[0]))
        prev = u
    return out


# ----------------------------------------------------------- eigenvalue


def dirichlet_rate(d=2, R=1.0, a_scale=0.5):
    """Decay rate of ``P(tau > t)`` for ``a = s I`` on ``B_R``: ``s j^2 / R^2``."""
    j = _bessel_zero(d / 2 - 1)
    return a_scale * j * j / (R * R)


def _bessel_zero(nu):
    return optimize.brentq(lambda z: special.jv(nu, z), 1.0, 4.0, xtol=1e-14)


def psi_tail_rate(d=2, R=1.0):
    """Decay rate of ``P(psi > s)`` for isotropic constant ``a`` (scale free in ``s``)."""
    j = _bessel_zero(d / 2 - 1)
    return j * j / (R * R)


# ------------------------------------------------------------- hitting


def _mobius_parameter(c, rho):
    m = lambda x, a: (x - a) / (1 - a * x)
    f = lambda a: m(c - rho, a) + m(c + rho, a)
    lo, hi = -1 + 1e-14, 1 - 1e-14
    return optimize.brentq(f, lo, hi, xtol=1e-15)


def hit_probability_disk(c, rho, x):
    """``P(hit closed disk B(c, rho) before leaving B_1)`` in ``d = 2``, exact.

    A Mobius automorphism of the unit disk maps the two boundary circles to
    concentric ones, where the harmonic measure is ``log|w| / log(rho0)``.
    """
    c = np.asarray(c, dtype=float)
    cn = float(np.linalg.norm(c))
    if cn + rho >= 1:
        raise ValueError("disk must lie inside the unit disk")
    z = complex(*x)
    if abs(z - complex(*c)) <= rho:
        return 1.0
    rot = complex(*c) / cn if cn > 0 else 1.0
    z = z / rot  # rotate so the disk center is on the positive real axis
    a = _mobius_parameter(cn, rho)
    w = lambda zz: (zz - a) / (1 - a * zz)
    rho0 = abs(w(cn + rho))
    return math.log(abs(w(z))) / math.log(rho0)


def hit_probability_fd(disks, x, hg=1 / 200, R=1.0):
    """Finite-difference harmonic measure of a union of closed disks inside ``B_R``.

    Solves ``Laplace u = 0`` off the obstacles with ``u = 1`` on them and
    ``u = 0`` on ``|y| = R``, using the Shortley-Weller stencil at cut
    cells, then interpolates bilinearly at ``x``.
    """
    disks = [(np.asarray(c, dtype=float), float(r)) for c, r in disks]
    n = int(round(R / hg))
    ax = np.arange(-n, n + 1) * hg
    X, Y = np.meshgrid(ax, ax, indexing="ij")

    def in_obstacle(p):
        return any(np.hypot(p[0] - c[0], p[1] - c[1]) <= r for c, r in disks)

    def boundary_hit(p, q):
        # fraction along p->q where the segment leaves the domain, and the value there
        best = (math.inf, 0.0)
        dv = q - p
        # outer circle |y| = R
        A = dv @ dv
        B = 2 * p @ dv
        C = p @ p - R * R
        disc = B * B - 4 * A * C
        if disc >= 0:
            t = (-B + math.sqrt(disc)) / (2 * A)
            if 0 < t <= 1:
                best = min(best, (t, 0.0))
        for c, r in disks:
            pc = p - c
            B = 2 * pc @ dv
            C = pc @ pc - r * r
            disc = B * B - 4 * A * C
            if disc >= 0:
                t = (-B - math.sqrt(disc)) / (2 * A)
                if 0 < t <= 1:
                    best = min(best, (t, 1.0))
        return best

    inside = (X**2 + Y**2 < R * R)
    for c, r in disks:
        inside &= np.hypot(X - c[0], Y - c[1]) > r
    idx = -np.ones(X.shape, dtype=np.int64)
    idx[inside] = np.arange(int(inside.sum()))
    rows, cols, vals = [], [], []
    rhs = np.zeros(int(inside.sum()))
    dirs = ((1, 0), (-1, 0), (0, 1), (0, -1))
    for i, j in zip(*np.nonzero(inside)):
        k = idx[i, j]
        p = np.array([X[i, j], Y[i, j]])
        arms = {}
        for di, dj in dirs:
            ii, jj = i + di, j + dj
            q = p + hg * np.array([di, dj])
            t, val = boundary_hit(p, q)
            if math.isfinite(t):
                arms[(di, dj)] = (max(t, 1e-6) * hg, None, val)
            elif 0 <= ii <= 2 * n and 0 <= jj <= 2 * n and inside[ii, jj]:
                arms[(di, dj)] = (hg, idx[ii, jj], None)
            else:
                arms[(di, dj)] = (hg, None, 1.0 if in_obstacle(q) else 0.0)
        diag = 0.0
        for axis in ((1, 0), (0, 1)):
            neg = (-axis[0], -axis[1])
            hp, jp, vp = arms[axis]
            hm, jm, vm = arms[neg]
            cp = 2.0 / (hp * (hp + hm))
            cm = 2.0 / (hm * (hp + hm))
            diag -= cp + cm
            for cc, jn, vv in ((cp, jp, vp), (cm, jm, vm)):
                if jn is None:
                    rhs[k] -= cc * vv
                else:
                    rows.append(k), cols.append(jn), vals.append(cc)
        rows.append(k), cols.append(k), vals.append(diag)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(len(rhs), len(rhs)))
    sol = spla.spsolve(A.tocsc(), rhs)
    U = np.zeros(X.shape)
    U[inside] = sol
    for c, r in disks:
        U[np.hypot(X - c[0], Y - c[1]) <= r] = 1.0
    # bilinear interpolation at x
    fx = (x[0] + R) / hg
    fy = (x[1] + R) / hg
    i0, j0 = int(math.floor(fx)), int(math.floor(fy))
    tx, ty = fx - i0, fy - j0
    return float((1 - tx) * (1 - ty) * U[i0, j0] + tx * (1 - ty) * U[i0 + 1, j0]
                 + (1 - tx) * ty * U[i0, j0 + 1] + tx * ty * U[i0 + 1, j0 + 1])


# ------------------------------------------------------ misc closed forms


def doob_bracket(t=1.0, trace=1.0):
    """``[E|x_t|^2, 4 E|x_t|^2]`` for driftless motion with ``tr a = trace``.

    ``E|x_t|^2 = 2 t tr a``; Doob's L2 maximal inequality gives the factor 4.
    """
    m2 = 2.0 * t * trace
    return m2, 4.0 * m2


def reflection_exit_bound(s, R, d=2):
    """Upper bound on ``P(tau_R <= s)`` for standard Brownian motion (``a = I/2``).

    Leaving ``B_R`` forces some coordinate past ``R / sqrt(d)``; each
    coordinate's running maximum is controlled by the reflection principle.
    """
    if s <= 0:
        return 0.0
    return min(1.0, 2 * d * 2 * special.ndtr(-(R / math.sqrt(d)) / math.sqrt(s)))


def phi_forward(rho, theta, d=2):
    """``int_{|p| <= rho} (1 + theta |p|)^(-d) dp`` in closed form for ``d = 2``."""
    if theta == 0:
        return math.pi ** (d / 2) / special.gamma(d / 2 + 1) * rho**d
    if d != 2:
        raise ValueError("closed form only for d = 2")
    return 2 * math.pi * (math.log1p(rho) - rho / (1 + rho))


def radial_monge_ampere(r, cumulative_mass, theta=0, d=2, radius=4.0):
    """Radial convex solution of the weighted Monge-Ampere problem, zero on ``|x| = radius``.

    For radial ``z`` the gradient image of ``B_s`` is the disk of radius
    ``z'(s)``, so ``phi_forward(z'(s)) = mu(B_s)`` and
    ``z(r) = -int_r^radius z'(s) ds``.  ``cumulative_mass(s)`` returns
    ``mu(B_s) = int_{B_s} f^d``.
    """
    def slope(s):
        m = cumulative_mass(s)
        if m <= 0:
            return 0.0
        if theta == 0:
            return (m / phi_forward(1.0, 0, d)) ** (1.0 / d)
        hi = 1.0
        while phi_forward(hi, 1, d) < m:
            hi *= 2
        return optimize.brentq(lambda p: phi_forward(p, 1, d) - m, 0.0, hi, xtol=1e-14)

    out = []
    for rr in np.atleast_1d(r):
        val, _ = integrate.quad(slope, float(rr), radius, limit=200, epsabs=1e-12, epsrel=1e-11)
        out.append(-val)
    return np.array(out)
