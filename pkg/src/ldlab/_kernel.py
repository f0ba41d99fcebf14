"""Euler-Maruyama path kernel with exit detection and path functionals.

One call simulates a contiguous block of path indices.  Every path reads
only its own counter-based noise, so splitting the index range across
workers cannot change any output.
"""

import math

import numba as nb
import numpy as np

from . import coefficients as co
from .rng import TAG_EXIT_BRIDGE, TAG_HIT_BRIDGE, fill_normals, uniform, word_to_uniform

# path status codes
EXITED = 0
CENSORED = 1
TRUNCATED = 2
INVALID = 3
STOPPED = 4

# domain kinds
DOM_BALL = 0
DOM_CYLINDER = 1
DOM_WHOLE = 2

# request mask bits
WANT_OCC = 1
WANT_PHI_OUT = 2
WANT_MAXDISP = 4
WANT_HIT = 8

# discount codes (bit i of the discount mask enables discount i)
DISC_NONE = 0
DISC_PHI = 1
DISC_T_PHI = 2
DISC_PHI_OUT = 3
DISC_T = 4
N_DISC = 5

# density codes
DENS_DET_D = 0  # det(a)^(1/d)
DENS_DET_D1 = 1  # det(a)^(1/(d+1))
DENS_ONE = 2
N_DENS = 3

# accumulator slots
ACC_PSI = 0
ACC_PHI = 1
ACC_PHI_OUT = 2
ACC_OCC = 3
ACC_MAXDISP = ACC_OCC + N_DENS * N_DISC
ACC_HIT = ACC_MAXDISP + 1
N_ACC = ACC_HIT + 1

# integer config layout
I_D, I_SIGMA, I_DRIFT, I_DOMAIN, I_BRIDGE, I_SUBSTEPS, I_MASK, I_DMASK, I_STOP_HIT = range(9)
N_ICFG = 9
# float config layout
(F_H, F_TMAX, F_CLIP, F_KAPPA, F_FLOOR, F_RADIUS, F_T, F_LAMBDA, F_ROUT,
 F_TRUNC) = range(10)
N_FCFG = 10

_BRIDGE_CUTOFF = 40.0


def occ_slot(density, discount):
    return ACC_OCC + N_DISC * density + discount


@nb.njit(inline="always")
def _normal_variance(a, nrm, d):
    # n^T (sigma sigma^T) n = 2 n^T a n
    s = 0.0
    for i in range(d):
        for j in range(d):
            s += nrm[i] * a[i, j] * nrm[j]
    return 2.0 * s


@nb.njit(inline="always")
def _discounts(dmask, lam, t, phi, phio, out):
    for c in range(N_DISC):
        out[c] = 1.0
    if dmask & (1 << DISC_PHI):
        out[DISC_PHI] = math.exp(-lam * phi)
    if dmask & (1 << DISC_T_PHI):
        out[DISC_T_PHI] = math.exp(-lam * (t + phi))
    if dmask & (1 << DISC_PHI_OUT):
        out[DISC_PHI_OUT] = math.exp(-lam * phio)
    if dmask & (1 << DISC_T):
        out[DISC_T] = math.exp(-lam * t)


@nb.njit(cache=True, error_model="numpy")
def run_block(first, count, key0, key1, icfg, fcfg, x0, center, sp, dp, fld, hit, occ_req,
              tau, status, xexit, acc, steps, clips):
    d = icfg[I_D]
    sk = icfg[I_SIGMA]
    dk = icfg[I_DRIFT]
    dom = icfg[I_DOMAIN]
    bridge = icfg[I_BRIDGE] != 0
    m = icfg[I_SUBSTEPS]
    mask = icfg[I_MASK]
    dmask = icfg[I_DMASK]
    stop_hit = icfg[I_STOP_HIT] != 0
    h = fcfg[F_H]
    tmax = fcfg[F_TMAX]
    clip = fcfg[F_CLIP]
    kappa = fcfg[F_KAPPA]
    floor = fcfg[F_FLOOR]
    R = fcfg[F_RADIUS]
    T = fcfg[F_T]
    lam = fcfg[F_LAMBDA]
    rout = fcfg[F_ROUT]
    teps = fcfg[F_TRUNC]

    want_occ = (mask & WANT_OCC) != 0
    want_out = (mask & WANT_PHI_OUT) != 0
    want_max = (mask & WANT_MAXDISP) != 0
    want_hit = (mask & WANT_HIT) != 0
    inv_d = 1.0 / d
    inv_d1 = 1.0 / (d + 1)
    rout2 = rout * rout

    S = np.empty((d, d))
    a = np.empty((d, d))
    S1 = np.empty((d, d))
    a1 = np.empty((d, d))
    x = np.empty(d)
    xn = np.empty(d)
    xe = np.empty(d)
    b = np.empty(d)
    dw = np.empty(d)
    z = np.empty(d)
    nrm = np.empty(d)
    nrm1 = np.empty(d)
    occ = np.zeros(N_DENS * N_DISC)
    dens0 = np.empty(N_DENS)
    dens1 = np.empty(N_DENS)
    disc0 = np.empty(N_DISC)
    disc1 = np.empty(N_DISC)

    const_sigma = sk == co.SIGMA_CONST
    det_c = 0.0
    tr_c = 0.0
    if const_sigma:
        co.eval_sigma(sk, sp, 0.0, x0, S)
        det_c, tr_c = co.diffusion_summary(S, a)
        S1[:, :] = S
        a1[:, :] = a
    g_c = det_c ** inv_d
    g1_c = det_c ** inv_d1
    zero_drift = dk == co.DRIFT_ZERO
    if zero_drift:
        for i in range(d):
            b[i] = 0.0

    for q in range(count):
        path = first + q
        for i in range(d):
            x[i] = x0[i]
        t = 0.0
        k = 0
        nclip = 0
        psi = 0.0
        phi = 0.0
        phio = 0.0
        occ[:] = 0.0
        maxd = 0.0
        hitt = np.inf
        st = -1
        tau_q = np.nan

        if const_sigma:
            det0 = det_c
            tr0 = tr_c
            g0 = g_c
        else:
            co.eval_sigma(sk, sp, t, x, S)
            det0, tr0 = co.diffusion_summary(S, a)
            g0 = det0 ** inv_d
        f0 = 0.0
        if want_occ:
            f0 = co.eval_field(fld, t, x)
            dens0[DENS_DET_D] = g0
            dens0[DENS_DET_D1] = g1_c if const_sigma else det0 ** inv_d1
            dens0[DENS_ONE] = 1.0
            _discounts(dmask, lam, t, phi, phio, disc0)
        out0 = 0.0
        if want_out:
            r2 = 0.0
            for i in range(d):
                r2 += x[i] * x[i]
            out0 = tr0 if r2 >= rout2 else 0.0
        sd0 = np.inf
        if want_hit:
            sd0 = co.target_distance(hit, t, x, nrm)
            if sd0 <= 0.0:
                hitt = 0.0
                if stop_hit:
                    st = STOPPED
                    tau_q = 0.0

        while st < 0:
            hk = h
            if kappa > 0.0:
                ell = max(co.drift_length_scale(dk, dp, x), floor)
                hk = min(h, (kappa * ell) ** 2)
            rem = tmax - t
            if dom == DOM_CYLINDER:
                rem = min(rem, T - t)
            last = False
            if hk >= rem * (1.0 - 1e-12):
                hk = rem
                last = True

            # Gaussian increment (m fine blocks summed for common random numbers)
            if m == 1:
                w2, w3, spare = fill_normals(key0, key1, path, k, dw)
                sq = math.sqrt(hk)
                for i in range(d):
                    dw[i] *= sq
            else:
                for i in range(d):
                    z[i] = 0.0
                for s in range(m):
                    w2, w3, spare = fill_normals(key0, key1, path, k * m + s, dw)
                    for i in range(d):
                        z[i] += dw[i]
                sq = math.sqrt(hk / m)
                for i in range(d):
                    dw[i] = z[i] * sq

            fac = hk
            if not zero_drift:
                co.eval_drift(dk, dp, t, x, b)
                bn = 0.0
                for i in range(d):
                    bn += b[i] * b[i]
                bn = math.sqrt(bn) * hk
                if bn > clip:
                    fac = hk * clip / bn
                    nclip += 1
            ok = True
            for i in range(d):
                v = x[i] + b[i] * fac
                for j in range(d):
                    v += S[i, j] * dw[j]
                xn[i] = v
                if not math.isfinite(v):
                    ok = False
            if not ok:
                st = INVALID
                break
            tn = t + hk

            # exit from the spatial domain
            w = 1.0
            exited = False
            if dom != DOM_WHOLE:
                r0 = 0.0
                r1 = 0.0
                for i in range(d):
                    r0 += (x[i] - center[i]) ** 2
                    r1 += (xn[i] - center[i]) ** 2
                r0 = math.sqrt(r0)
                r1 = math.sqrt(r1)
                d0 = R - r0
                d1 = R - r1
                if d1 <= 0.0:
                    w = d0 / (d0 - d1)
                    exited = True
                elif bridge and 2.0 * d0 * d1 < _BRIDGE_CUTOFF * 2.0 * tr0 * hk:
                    # 2 tr a bounds the normal variance, so this skips hopeless tests
                    if r0 > 0.0:
                        for i in range(d):
                            nrm1[i] = (x[i] - center[i]) / r0
                        sn2 = _normal_variance(a, nrm1, d)
                        if sn2 > 0.0:
                            arg = 2.0 * d0 * d1 / (sn2 * hk)
                            if arg < _BRIDGE_CUTOFF:
                                if spare:
                                    u = word_to_uniform(w2)
                                else:
                                    u = uniform(key0, key1, path, k, TAG_EXIT_BRIDGE)
                                if u < math.exp(-arg):
                                    w = d0 / (d0 + d1)
                                    exited = True

            # first hit of the target set
            stopped = False
            if want_hit and hitt == np.inf:
                sd1 = co.target_distance(hit, tn, xn, nrm1)
                hw = -1.0
                if sd1 <= 0.0:
                    hw = sd0 / (sd0 - sd1) if (sd0 > 0.0 and sd0 < np.inf) else 1.0
                elif (bridge and sd0 < np.inf and sd1 < np.inf
                      and 2.0 * sd0 * sd1 < _BRIDGE_CUTOFF * 2.0 * tr0 * hk):
                    sn2 = _normal_variance(a, nrm, d)
                    if sn2 > 0.0:
                        arg = 2.0 * sd0 * sd1 / (sn2 * hk)
                        if arg < _BRIDGE_CUTOFF:
                            if spare:
                                u = word_to_uniform(w3)
                            else:
                                u = uniform(key0, key1, path, k, TAG_HIT_BRIDGE)
                            if u < math.exp(-arg):
                                hw = sd0 / (sd0 + sd1)
                if hw >= 0.0 and (not exited or hw <= w):
                    hitt = t + hw * hk
                    if stop_hit:
                        w = hw
                        exited = False
                        stopped = True
                sd0 = sd1
                for i in range(d):
                    nrm[i] = nrm1[i]

            # end point of this step
            if w < 1.0:
                for i in range(d):
                    xe[i] = x[i] + w * (xn[i] - x[i])
                if exited:
                    re = 0.0
                    for i in range(d):
                        re += (xe[i] - center[i]) ** 2
                    re = math.sqrt(re)
                    if re > 0.0:
                        for i in range(d):
                            xe[i] = center[i] + (xe[i] - center[i]) * (R / re)
                te = t + w * hk
            else:
                for i in range(d):
                    xe[i] = xn[i]
                te = tn
            dt = te - t

            if const_sigma:
                det1 = det_c
                tr1 = tr_c
                g1 = g_c
            else:
                co.eval_sigma(sk, sp, te, xe, S1)
                det1, tr1 = co.diffusion_summary(S1, a1)
                g1 = det1 ** inv_d
            psi += 0.5 * (g0 + g1) * dt
            phi += 0.5 * (tr0 + tr1) * dt
            out1 = 0.0
            if want_out:
                r2 = 0.0
                for i in range(d):
                    r2 += xe[i] * xe[i]
                out1 = tr1 if r2 >= rout2 else 0.0
                phio += 0.5 * (out0 + out1) * dt
            if want_occ:
                f1 = co.eval_field(fld, te, xe)
                dens1[DENS_DET_D] = g1
                dens1[DENS_DET_D1] = g1_c if const_sigma else det1 ** inv_d1
                dens1[DENS_ONE] = 1.0
                _discounts(dmask, lam, te, phi, phio, disc1)
                if f0 != 0.0 or f1 != 0.0:
                    for j in range(occ_req.shape[0]):
                        e = occ_req[j] // N_DISC
                        c = occ_req[j] % N_DISC
                        occ[occ_req[j]] += 0.5 * dt * (
                            f0 * dens0[e] * disc0[c] + f1 * dens1[e] * disc1[c])
                f0 = f1
                for e in range(N_DENS):
                    dens0[e] = dens1[e]
                for c in range(N_DISC):
                    disc0[c] = disc1[c]
            if want_max:
                r2 = 0.0
                for i in range(d):
                    r2 += (xe[i] - x0[i]) ** 2
                if r2 > maxd:
                    maxd = r2

            for i in range(d):
                x[i] = xe[i]
            t = te
            k += 1
            g0 = g1
            det0 = det1
            tr0 = tr1
            out0 = out1
            if not const_sigma:
                S[:, :] = S1
                a[:, :] = a1

            if stopped:
                st = STOPPED
                tau_q = t
            elif exited:
                st = EXITED
                tau_q = t
            elif dom == DOM_CYLINDER and t >= T * (1.0 - 1e-12):
                st = EXITED
                tau_q = T
            elif last:
                st = CENSORED
                tau_q = tmax
            elif dmask != 0 and want_occ:
                dmax = 0.0
                for c in range(1, N_DISC):
                    if dmask & (1 << c):
                        dmax = max(dmax, disc0[c])
                if dmax < teps:
                    st = TRUNCATED
                    tau_q = t

        if st == INVALID:
            tau_q = np.nan
        tau[q] = tau_q
        status[q] = st
        for i in range(d):
            xexit[q, i] = x[i]
        acc[q, ACC_PSI] = psi
        acc[q, ACC_PHI] = phi
        acc[q, ACC_PHI_OUT] = phio
        for j in range(N_DENS * N_DISC):
            acc[q, ACC_OCC + j] = occ[j]
        acc[q, ACC_MAXDISP] = math.sqrt(maxd)
        acc[q, ACC_HIT] = hitt
        steps[q] = k
        clips[q] = nclip
