"""Jitted coefficient, field, and target-set evaluators.

Coefficients are encoded as ``(kind, params)`` pairs so that a single compiled
simulation kernel covers every scenario; see :mod:`ldlab.model` for the
Python-facing types that build these encodings.

Parameter layouts (``d`` is the dimension, centers are padded to length 3):

sigma
    ``SIGMA_CONST``   row-major ``d*d`` matrix.
    ``SIGMA_SWITCH``  ``[cx, cy, cz, r, M_in (d*d), M_out (d*d)]``; ``M_in`` is
    used on the open ball ``|x - c| < r``.
drift
    ``DRIFT_ZERO``    nothing.
    ``DRIFT_CONST``   vector of length ``d``.
    ``DRIFT_RADIAL``  ``[c, alpha, r_lo, r_hi, cx, cy, cz]``:
    ``b = -c (x - c0) |x - c0|^(-1-alpha)`` on ``r_lo < |x - c0| < r_hi``.
    ``DRIFT_LINEAR``  row-major ``d*d`` matrix ``M``, ``b = M x``.
envelope
    ``ENV_ZERO`` or ``ENV_RADIAL`` with the ``DRIFT_RADIAL`` layout, giving
    ``c |x - c0|^(-alpha)`` on the same shell.
field
    ``[n, piece_0, ..., piece_{n-1}]`` with ``PIECE_WIDTH`` floats per piece:
    ``[kind, amp, t_lo, t_hi, r0, r1, alpha, _, cx, cy, cz]``.
target set (hitting)
    ``[n, shape_0, ...]`` with ``SHAPE_WIDTH`` floats per shape:
    ``[kind, t_lo, t_hi, r_in, r_out, cx, cy, cz]``.
"""

import math

import numba as nb
import numpy as np

SIGMA_CONST = 0
SIGMA_SWITCH = 1

DRIFT_ZERO = 0
DRIFT_CONST = 1
DRIFT_RADIAL = 2
DRIFT_LINEAR = 3

ENV_ZERO = 0
ENV_RADIAL = 1

PIECE_CONST = 0
PIECE_SHELL = 1
PIECE_POWER = 2
PIECE_WIDTH = 11

SHAPE_BALL = 0
SHAPE_ANNULUS = 1
SHAPE_WIDTH = 8


@nb.njit(inline="always")
def _dist(x, p, off):
    s = 0.0
    for i in range(x.shape[0]):
        v = x[i] - p[off + i]
        s += v * v
    return math.sqrt(s)


@nb.njit
def eval_sigma(kind, p, t, x, out):
    d = x.shape[0]
    if kind == SIGMA_CONST:
        for i in range(d):
            for j in range(d):
                out[i, j] = p[i * d + j]
    else:
        r = _dist(x, p, 0)
        off = 4 if r < p[3] else 4 + d * d
        for i in range(d):
            for j in range(d):
                out[i, j] = p[off + i * d + j]


@nb.njit
def eval_drift(kind, p, t, x, out):
    d = x.shape[0]
    if kind == DRIFT_ZERO:
        for i in range(d):
            out[i] = 0.0
    elif kind == DRIFT_CONST:
        for i in range(d):
            out[i] = p[i]
    elif kind == DRIFT_RADIAL:
        r = _dist(x, p, 4)
        if r > p[2] and r < p[3]:
            s = -p[0] * r ** (-1.0 - p[1])
            for i in range(d):
                out[i] = s * (x[i] - p[4 + i])
        else:
            for i in range(d):
                out[i] = 0.0
    else:
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += p[i * d + j] * x[j]
            out[i] = acc


@nb.njit
def drift_length_scale(kind, p, x):
    """Length scale the time step must resolve near ``x`` (inf if none)."""
    if kind == DRIFT_RADIAL:
        r = _dist(x, p, 4)
        return max(r, p[2])
    return np.inf


@nb.njit
def eval_envelope(kind, p, x):
    if kind == ENV_ZERO:
        return 0.0
    r = _dist(x, p, 4)
    if r > p[2] and r < p[3]:
        return p[0] * r ** (-p[1])
    return 0.0


@nb.njit
def diffusion_summary(S, a):
    """Fill ``a = S S^T / 2``; return ``(det a, tr a)``."""
    d = S.shape[0]
    m = S.shape[1]
    for i in range(d):
        for j in range(i, d):
            acc = 0.0
            for k in range(m):
                acc += S[i, k] * S[j, k]
            a[i, j] = 0.5 * acc
            a[j, i] = 0.5 * acc
    tr = 0.0
    for i in range(d):
        tr += a[i, i]
    if d == 1:
        det = a[0, 0]
    elif d == 2:
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    elif d == 3:
        det = (a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
               - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
               + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]))
    else:
        det = np.linalg.det(a)
    return max(det, 0.0), tr


@nb.njit
def eval_field(p, t, x):
    n = int(p[0])
    total = 0.0
    for k in range(n):
        off = 1 + k * PIECE_WIDTH
        if t < p[off + 2] or t >= p[off + 3]:
            continue
        kind = int(p[off])
        amp = p[off + 1]
        if kind == PIECE_CONST:
            total += amp
            continue
        r = _dist(x, p, off + 8)
        if kind == PIECE_SHELL:
            if r >= p[off + 4] and r < p[off + 5]:
                total += amp
        else:
            if r > p[off + 4] and r < p[off + 5]:
                total += amp * r ** (-p[off + 6])
    return total


@nb.njit
def target_distance(p, t, x, normal):
    """Signed distance from ``x`` to the target set (<= 0 inside).

    ``normal`` receives the unit vector pointing away from the nearest
    active shape; returns ``inf`` when no shape is active at time ``t``.
    """
    n = int(p[0])
    d = x.shape[0]
    best = np.inf
    for k in range(n):
        off = 1 + k * SHAPE_WIDTH
        if t < p[off + 1] or t > p[off + 2]:
            continue
        r = _dist(x, p, off + 5)
        if int(p[off]) == SHAPE_BALL:
            sd = r - p[off + 4]
            sgn = 1.0
        else:
            inner = p[off + 3] - r
            outer = r - p[off + 4]
            if inner > outer:
                sd = inner
                sgn = -1.0
            else:
                sd = outer
                sgn = 1.0
        if sd < best:
            best = sd
            if r > 0.0:
                for i in range(d):
                    normal[i] = sgn * (x[i] - p[off + 5 + i]) / r
            else:
                for i in range(d):
                    normal[i] = 0.0
                normal[0] = 1.0
    return best


# batch evaluators for Python-side checks and quadrature


@nb.njit
def batch_field(p, t, pts):
    out = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        out[i] = eval_field(p, t[i], pts[i])
    return out


@nb.njit
def batch_envelope(kind, p, pts):
    out = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        out[i] = eval_envelope(kind, p, pts[i])
    return out


@nb.njit
def batch_coefficients(sk, sp, dk, dp, t, pts, m):
    n, d = pts.shape
    sig = np.empty((n, d, m))
    drift = np.empty((n, d))
    buf_s = np.empty((d, m))
    buf_b = np.empty(d)
    for i in range(n):
        eval_sigma(sk, sp, t[i], pts[i], buf_s)
        eval_drift(dk, dp, t[i], pts[i], buf_b)
        sig[i] = buf_s
        drift[i] = buf_b
    return sig, drift
