"""Convex barriers from the weighted Monge-Ampere equation on ``B_4``.

A grid function ``z`` is identified with the lower convex envelope of its
lifted nodes.  The normal image of a node is the convex polytope spanned by
the gradients of the lower-hull facets around it; its weighted volume
``int (1 + theta |p|)^(-d) dp`` is the node's Monge-Ampere mass.  The solver
drives those masses to ``int f^d`` over each node's lattice cell, with zero
values on ``|x| = 4``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import integrate, ndimage, optimize, sparse
from scipy.sparse import linalg as spla
from scipy.spatial import ConvexHull, Delaunay

from .model import ScalarField, ball_volume, sphere_area

RADIUS = 4.0
SUPPORT = 2.0

_GL8 = np.polynomial.legendre.leggauss(8)


class NotConvex(ValueError):
    def __init__(self, node, excess):
        super().__init__(f"node {node} lies {excess:.3g} above the lower convex envelope")
        self.node = node
        self.excess = excess


class NoConvergence(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


# ------------------------------------------------------------- kernel


def kernel_mass(rho, theta, d=2):
    """``int_{|p| <= rho} (1 + theta |p|)^(-d) dp``."""
    rho = float(rho)
    if rho <= 0:
        return 0.0
    if theta == 0:
        return ball_volume(d, rho)
    if d == 2:
        return 2 * math.pi * (math.log1p(rho) - rho / (1 + rho))
    if d == 3:
        u = 1 + rho
        return 4 * math.pi * (math.log(u) + 2 / u - 0.5 / u**2 - 1.5)
    val, _ = integrate.quad(lambda r: r ** (d - 1) / (1 + r) ** d, 0, rho)
    return sphere_area(d) * val


def kernel_capacity(theta, d=2):
    """Total weighted mass of gradient space (infinite for both kernels)."""
    return math.inf


def phi_inverse(t, theta=0, d=2):
    """Radius ``rho`` whose gradient ball has weighted mass ``t``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0.0
    if t >= kernel_capacity(theta, d):
        raise ValueError("t exceeds the total mass of the kernel")
    if theta == 0:
        return (t / ball_volume(d)) ** (1.0 / d)
    hi = 1.0
    while kernel_mass(hi, theta, d) < t:
        hi *= 2.0
    return optimize.brentq(lambda r: kernel_mass(r, theta, d) - t, 0.0, hi, xtol=1e-15, rtol=1e-14)


def _weight(p, theta, d):
    if theta == 0:
        return np.ones(p.shape[:-1])
    return (1.0 + np.linalg.norm(p, axis=-1)) ** (-d)


def _fan_density(rho, theta):
    # int_0^1 w(u rho) u du for the d = 2 kernel
    if theta == 0:
        return np.full_like(rho, 0.5)
    out = np.empty_like(rho)
    small = rho < 1e-3
    r = rho[small]
    out[small] = 0.5 - 2 * r / 3 + 0.75 * r * r - 0.8 * r**3
    r = rho[~small]
    out[~small] = (np.log1p(r) - r / (1 + r)) / (r * r)
    return out


def _fan_mass(a, b, theta, rtol=1e-10, max_depth=40):
    """Signed weighted mass of the triangles ``(0, a_k, b_k)``.

    ``int_tri w = cross(a, b) int_0^1 G(|a + v (b - a)|) dv``; the ``v``
    integral uses adaptive Gauss-Legendre bisection.
    """
    cr = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    if theta == 0:
        return 0.5 * cr
    xg, wg = np.polynomial.legendre.leggauss(6)

    def rule(e, lo, hi):
        v = 0.5 * (hi - lo)[:, None] * (xg[None, :] + 1) + lo[:, None]
        q = a[e][:, None, :] + v[:, :, None] * (b[e] - a[e])[:, None, :]
        g = _fan_density(np.linalg.norm(q, axis=2), 1)
        return 0.5 * (hi - lo) * (g @ wg)

    total = np.zeros(len(a))
    e = np.arange(len(a))
    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    whole = rule(e, lo, hi)
    for _ in range(max_depth):
        mid = 0.5 * (lo + hi)
        left = rule(e, lo, mid)
        right = rule(e, mid, hi)
        fine = left + right
        ok = np.abs(fine - whole) <= rtol * np.maximum(np.abs(fine), 1e-300) + 1e-16 * (hi - lo)
        np.add.at(total, e[ok], fine[ok])
        keep = ~ok
        if not keep.any():
            break
        e = np.concatenate([e[keep], e[keep]])
        lo, hi = np.concatenate([lo[keep], mid[keep]]), np.concatenate([mid[keep], hi[keep]])
        whole = np.concatenate([left[keep], right[keep]])
    else:
        np.add.at(total, e, whole)
    return cr * total


def weighted_polygon_mass(vertices, theta=0):
    """Weighted mass of a convex polygon given by counter-clockwise ``vertices``."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    return float(np.sum(_fan_mass(v, np.roll(v, -1, axis=0), theta)))


# --------------------------------------------------------------- nodes


def _boundary_points(d, h, radius):
    if d == 2:
        n = int(math.ceil(2 * math.pi * radius / h))
        ang = 2 * math.pi * np.arange(n) / n
        return radius * np.column_stack([np.cos(ang), np.sin(ang)])
    n = int(math.ceil(4 * math.pi * radius**2 / h**2))
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    th = math.pi * (1 + 5**0.5) * k
    return radius * np.column_stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)])


@dataclass
class GridConvexFunction:
    """Nodal values of a convex function on ``B_radius``.

    Lattice nodes ``h * k`` with ``|x| <= radius - h`` carry the unknowns;
    the boundary nodes sit on ``|x| = radius`` (spacing about ``h``) with
    value 0.  ``values`` must equal the lower convex envelope of the lifted
    nodes.
    """

    points: np.ndarray
    values: np.ndarray
    boundary: np.ndarray
    h: float
    radius: float = RADIUS
    info: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @classmethod
    def lattice(cls, h=1 / 16, d=2, radius=RADIUS, values=None):
        if d not in (2, 3):
            raise ValueError("only d = 2 and d = 3 are supported")
        m = int(math.floor(radius / h))
        ax = np.arange(-m, m + 1) * h
        mesh = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
        inner = mesh[np.linalg.norm(mesh, axis=1) <= radius - h + 1e-12]
        bnd = _boundary_points(d, h, radius)
        pts = np.vstack([inner, bnd])
        is_b = np.zeros(len(pts), dtype=bool)
        is_b[len(inner):] = True
        vals = np.zeros(len(pts)) if values is None else np.asarray(values, dtype=float)
        return cls(pts, vals, is_b, h, radius)

    def with_values(self, values):
        v = np.asarray(values, dtype=float).copy()
        v[self.boundary] = 0.0
        return GridConvexFunction(self.points, v, self.boundary, self.h, self.radius, dict(self.info))

    @property
    def interior(self):
        return np.flatnonzero(~self.boundary)

    def lattice_index(self):
        """Integer lattice coordinates of the interior nodes (offset to start at 0)."""
        k = np.rint(self.points[~self.boundary] / self.h).astype(int)
        return k - k.min(axis=0)

    def as_array(self):
        """Interior values on a dense ``d``-dimensional array (NaN elsewhere) and the axis."""
        k = np.rint(self.points[~self.boundary] / self.h).astype(int)
        m = int(k.max())
        arr = np.full((2 * m + 1,) * self.d, np.nan)
        arr[tuple((k + m).T)] = self.values[~self.boundary]
        return arr, np.arange(-m, m + 1) * self.h

    def __add__(self, other: "GridConvexFunction"):
        if other.points.shape != self.points.shape or not np.array_equal(other.points, self.points):
            raise ValueError("grid functions live on different node sets")
        return self.with_values(self.values + other.values)

    def scaled(self, c):
        return self.with_values(c * self.values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


# ---------------------------------------------------------- lower hull


@dataclass
class LowerHull:
    simplices: np.ndarray   # (m, d+1) node indices into the lifted point set
    grads: np.ndarray       # (m, d) facet gradients
    offsets: np.ndarray     # (m,) z = grads . x + offsets
    vertex: np.ndarray      # bool per point: is a vertex of some lower facet


def lower_hull(points, values) -> LowerHull:
    pts = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    d = pts.shape[1]
    # an affine lift is flat: any triangulation of the base carries it
    X = np.column_stack([pts, np.ones(len(pts))])
    coef = np.linalg.lstsq(X, values, rcond=None)[0]
    if np.max(np.abs(X @ coef - values)) <= 1e-12 * max(1.0, np.max(np.abs(values))):
        simp = Delaunay(pts).simplices
        vert = np.zeros(len(pts), dtype=bool)
        vert[simp.ravel()] = True
        return LowerHull(simp, np.tile(coef[:d], (len(simp), 1)), np.full(len(simp), coef[d]), vert)
    lifted = np.column_stack([pts, values])
    hull = ConvexHull(lifted, qhull_options="Qt")
    eq = hull.equations
    low = eq[:, d] < -1e-12
    simp = hull.simplices[low]
    nrm = eq[low]
    grads = -nrm[:, :d] / nrm[:, d:d + 1]
    offs = -nrm[:, d + 1] / nrm[:, d]
    vert = np.zeros(len(pts), dtype=bool)
    vert[simp.ravel()] = True
    # recompute gradients from the vertex values (exact for the stored simplex)
    E = pts[simp[:, 1:]] - pts[simp[:, :1]]
    dz = values[simp[:, 1:]] - values[simp[:, :1]]
    ok = np.abs(np.linalg.det(E)) > 1e-14 * np.max(np.abs(E)) ** d
    grads[ok] = np.linalg.solve(E[ok], dz[ok][..., None])[..., 0]
    offs[ok] = values[simp[ok, 0]] - np.einsum("ij,ij->i", grads[ok], pts[simp[ok, 0]])
    simp, grads, offs = simp[ok], grads[ok], offs[ok]
    return LowerHull(simp, grads, offs, vert)


def envelope_values(hull: LowerHull, x, chunk=2048):
    """Lower envelope at ``x``: the largest supporting facet plane."""
    x = np.atleast_2d(x)
    out = np.empty(len(x))
    arg = np.empty(len(x), dtype=int)
    for s in range(0, len(x), chunk):
        v = x[s:s + chunk] @ hull.grads.T + hull.offsets
        arg[s:s + chunk] = np.argmax(v, axis=1)
        out[s:s + chunk] = v[np.arange(len(v)), arg[s:s + chunk]]
    return out, arg


def check_convex(z: GridConvexFunction, tol=1e-9):
    """Raise :class:`NotConvex` at the first node above the lower envelope."""
    hull = lower_hull(z.points, z.values)
    env, _ = envelope_values(hull, z.points)
    excess = z.values - env
    scale = tol * max(1.0, z.max_abs())
    bad = np.flatnonzero(excess > scale)
    if len(bad):
        raise NotConvex(int(bad[0]), float(excess[bad[0]]))
    if np.any(z.values > scale):
        j = int(np.argmax(z.values))
        raise NotConvex(j, float(z.values[j]))
    return hull


# -------------------------------------------------------------- cells


@dataclass
class SubgradientCell:
    """Normal image of one node: polygon vertices (d = 2) or spanning gradients (d = 3)."""

    node: int
    vertices: np.ndarray
    mass: float
    error: float = 0.0


def _fans(points, hull: LowerHull, nodes):
    """Counter-clockwise incident facets around each node (d = 2), CSR layout."""
    simp = hull.simplices
    tri = np.repeat(np.arange(len(simp)), 3)
    nd = simp.ravel()
    want = np.zeros(len(points), dtype=bool)
    want[nodes] = True
    keep = want[nd]
    tri, nd = tri[keep], nd[keep]
    cen = points[simp[tri]].mean(axis=1) - points[nd]
    ang = np.arctan2(cen[:, 1], cen[:, 0])
    order = np.lexsort((ang, nd))
    tri, nd = tri[order], nd[order]
    counts = np.bincount(nd, minlength=len(points))
    ptr = np.concatenate([[0], np.cumsum(counts)])
    return tri, nd, ptr


def _polygon_edges(tri, nd, ptr):
    # consecutive facet pairs around each node, closing the cycle
    idx = np.arange(len(tri))
    nxt = idx + 1
    last = idx == ptr[nd + 1] - 1
    nxt[last] = ptr[nd[last]]
    return tri, tri[nxt], nd


def _hat_gradients(points, simp):
    """Gradients of the P1 hat functions on each simplex, shape (m, d+1, d)."""
    E = points[simp[:, 1:]] - points[simp[:, :1]]
    inv = np.linalg.inv(E)                       # (m, d, d): g = inv @ dz
    rest = np.transpose(inv, (0, 2, 1))          # d g / d z_{k} = inv[:, :, k-1]
    first = -rest.sum(axis=1, keepdims=True)
    return np.concatenate([first, rest], axis=1)


def _cell_masses_2d(points, values, nodes, theta, jacobian=False):
    hull = lower_hull(points, values)
    tri, nd, ptr = _fans(points, hull, nodes)
    A_t, B_t, owner = _polygon_edges(tri, nd, ptr)
    A = hull.grads[A_t]
    B = hull.grads[B_t]
    contrib = _fan_mass(A, B, theta)
    mass = np.bincount(owner, weights=contrib, minlength=len(points))
    missing = ~hull.vertex[nodes]
    out = {"hull": hull, "mass": mass[nodes], "missing": missing, "fans": (tri, nd, ptr)}
    if not jacobian:
        return out
    # d mass / d facet gradient via the flux through each polygon edge
    nvec = np.column_stack([B[:, 1] - A[:, 1], -(B[:, 0] - A[:, 0])])
    s = 0.5 * (_GL8[0] + 1)
    ws = 0.5 * _GL8[1]
    q = A[:, None, :] + s[None, :, None] * (B - A)[:, None, :]
    w = _weight(q, theta, 2)
    JA = (w * (1 - s)) @ ws
    KB = (w * s) @ ws
    hat = _hat_gradients(points, hull.simplices)
    rows, cols, vals = [], [], []
    for t_idx, coef in ((A_t, JA), (B_t, KB)):
        vec = nvec * coef[:, None]
        for k in range(3):
            cols.append(hull.simplices[t_idx, k])
            rows.append(owner)
            vals.append(np.einsum("ij,ij->i", vec, hat[t_idx, k]))
    J = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(len(points), len(points))).tocsr()
    out["jacobian"] = J[nodes][:, nodes]
    return out


def _cells_mc(points, values, nodes, theta, samples=4000, seed=0):
    hull = lower_hull(points, values)
    d = points.shape[1]
    rng = np.random.default_rng(seed)
    inc = [[] for _ in range(len(points))]
    for t, s in enumerate(hull.simplices):
        for v in s:
            inc[v].append(t)
    cells = []
    for i in nodes:
        g = hull.grads[inc[i]] if inc[i] else np.zeros((0, d))
        if len(g) <= d:
            cells.append(SubgradientCell(int(i), g, 0.0, 0.0))
            continue
        lo, hi = g.min(axis=0), g.max(axis=0)
        vol = float(np.prod(hi - lo))
        if vol <= 0:
            cells.append(SubgradientCell(int(i), g, 0.0, 0.0))
            continue
        try:
            tri = Delaunay(g)
        except Exception:
            cells.append(SubgradientCell(int(i), g, 0.0, 0.0))
            continue
        p = lo + (hi - lo) * rng.random((samples, d))
        inside = tri.find_simplex(p) >= 0
        val = vol * np.where(inside, _weight(p, theta, d), 0.0)
        cells.append(SubgradientCell(int(i), g, float(val.mean()), float(val.std(ddof=1) / math.sqrt(samples))))
    return cells


def subgradient_measure(z: GridConvexFunction, theta=0, nodes=None, check=True) -> List[SubgradientCell]:
    """Normal images of the interior nodes and their weighted masses.

    ``d = 2`` cells are exact polygons (masses by adaptive quadrature of the
    radial kernel); ``d = 3`` masses are Monte Carlo estimates with their
    standard error in ``error``.
    """
    if check:
        check_convex(z)
    nodes = z.interior if nodes is None else np.asarray(nodes)
    if z.d == 3:
        return _cells_mc(z.points, z.values, nodes, theta)
    res = _cell_masses_2d(z.points, z.values, nodes, theta)
    hull = res["hull"]
    tri, nd, ptr = res["fans"]
    cells = []
    for k, i in enumerate(nodes):
        ts = tri[ptr[i]:ptr[i + 1]]
        verts = hull.grads[ts] if not res["missing"][k] else np.zeros((0, 2))
        cells.append(SubgradientCell(int(i), verts, float(res["mass"][k]) if not res["missing"][k] else 0.0))
    return cells


# ------------------------------------------------------------- targets


def _square_rule(q=8):
    x, w = np.polynomial.legendre.leggauss(q)
    u = 0.5 * (x + 1)
    wu = 0.5 * w
    U, V = np.meshgrid(u, u, indexing="ij")
    W = np.outer(wu, wu)
    return U.ravel(), V.ravel(), W.ravel()


def target_masses(f: ScalarField, z: GridConvexFunction, q=8, refine=8):
    """``int f^d`` over the lattice cell ``x_i + [-h/2, h/2]^d`` of every interior node.

    Cells are split into triangles from an apex (a singular point of ``f``
    inside the cell, else the node) with a Duffy map, which absorbs
    ``|x|^(-alpha d)`` singularities; cells crossed by a breakpoint sphere of
    ``f`` are subdivided ``refine`` times per axis.
    """
    if z.d != 2:
        raise NotImplementedError("target masses are implemented for d = 2")
    d = 2
    h = z.h
    nodes = z.points[~z.boundary]
    m = np.zeros(len(z.points))
    if f.is_zero:
        return m
    U, V, W = _square_rule(q)
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * 0.5
    sing = f.singular_points()
    cuts = []
    for rec in f.pieces:
        c = rec[8:8 + d]
        for r in (rec[4], rec[5]):
            if 0 < r < math.inf:
                cuts.append((c, r))

    def duffy(apex, sq_c, size):
        # apex (n, 2), square centres (n, 2); returns integral of f^d over the squares
        tot = np.zeros(len(apex))
        for k in range(4):
            c0 = sq_c + size * corners[k]
            c1 = sq_c + size * corners[(k + 1) % 4]
            e0 = c0 - apex
            e1 = c1 - apex
            jac = np.abs(e0[:, 0] * e1[:, 1] - e0[:, 1] * e1[:, 0])
            p = apex[:, None, :] + U[None, :, None] * (e0[:, None, :] + V[None, :, None] * (e1 - e0)[:, None, :])
            vals = f(p.reshape(-1, d)).reshape(len(apex), -1) ** d
            tot += jac * ((vals * U[None, :]) @ W)
        return tot

    apex = nodes.copy()
    for s in sing:
        inside = np.all(np.abs(nodes - s) <= h / 2 + 1e-15, axis=1)
        apex[inside] = s
    cut = np.zeros(len(nodes), dtype=bool)
    for c, r in cuts:
        dist = np.linalg.norm(nodes - c, axis=1)
        cut |= (dist - h / math.sqrt(2) <= r) & (dist + h / math.sqrt(2) >= r)
    plain = ~cut
    out = np.zeros(len(nodes))
    out[plain] = duffy(apex[plain], nodes[plain], h)
    if cut.any():
        sub = (np.arange(refine) + 0.5) / refine - 0.5
        off = np.stack(np.meshgrid(sub, sub, indexing="ij"), axis=-1).reshape(-1, 2) * h
        idx = np.flatnonzero(cut)
        centres = (nodes[idx][:, None, :] + off[None, :, :]).reshape(-1, 2)
        sub_apex = centres.copy()
        for s in sing:
            inside = np.all(np.abs(centres - s) <= h / (2 * refine) + 1e-15, axis=1)
            sub_apex[inside] = s
        vals = duffy(sub_apex, centres, h / refine).reshape(len(idx), -1).sum(axis=1)
        out[idx] = vals
    m[~z.boundary] = out
    return m


# --------------------------------------------------------------- solver


def _initial_guess(z0: GridConvexFunction, total, theta):
    slope = phi_inverse(total, theta, z0.d) / z0.radius
    r2 = np.sum(z0.points**2, axis=1)
    return 0.5 * slope * (r2 - z0.radius**2)


def solve_aleksandrov(f: ScalarField, theta=0, h=1 / 16, tol=1e-9, max_iter=60, d=2,
                      radius=RADIUS, support=SUPPORT, calibration=False) -> GridConvexFunction:
    """Solve ``weighted mass(node) = int_{cell} f^d`` with ``z = 0`` on ``|x| = radius``.

    ``f`` is cut off outside ``B_support`` unless ``calibration`` is set, in
    which case the data are taken on all of ``B_radius``.  Nodes with zero
    target carry no unknown: their values are the envelope of the others.
    The unknown heights are found by damped Newton iterations on the cell
    masses, each step halved until every active node keeps a cell of mass
    at least half the smallest target and the residual drops.

    Returns the grid function with ``info`` holding the residual history,
    target and achieved masses.
    """
    if d != 2:
        raise NotImplementedError("the Monge-Ampere solver is implemented for d = 2")
    if theta not in (0, 1):
        raise ValueError("theta must be 0 or 1")
    z = GridConvexFunction.lattice(h, d, radius)
    data = f if calibration else _cut(f, support)
    m = target_masses(data, z)
    total = float(m.sum())
    if total == 0:
        z.info.update(history=[0.0], targets=m, masses=np.zeros_like(m), active=np.zeros(len(m), bool),
                      iterations=0, theta=theta)
        return z
    active_mask = m > 1e-13 * m.max()
    act = np.flatnonzero(active_mask)
    sub = np.flatnonzero(active_mask | z.boundary)     # points in the working hull
    loc = np.full(len(z.points), -1)
    loc[sub] = np.arange(len(sub))
    pts = z.points[sub]
    vals = _initial_guess(z, total, theta)[sub]
    vals[z.boundary[sub]] = 0.0
    a_loc = loc[act]
    target = m[act]
    floor = 0.5 * target.min()
    history = []
    res = _cell_masses_2d(pts, vals, a_loc, theta, jacobian=True)
    resid = target - res["mass"]
    norm = float(np.abs(resid).sum())
    for it in range(max_iter + 1):
        history.append(float(np.abs(resid).max() / total))
        if history[-1] <= tol:
            break
        if it == max_iter:
            raise NoConvergence(f"no convergence after {max_iter} Newton steps", history)
        step = spla.spsolve(res["jacobian"].tocsc(), resid)
        tau = 1.0
        while True:
            trial = vals.copy()
            trial[a_loc] += tau * step
            if np.all(trial[a_loc] < 0):
                r2 = _cell_masses_2d(pts, trial, a_loc, theta, jacobian=True)
                ok = not r2["missing"].any() and r2["mass"].min() >= min(floor, res["mass"].min())
                if ok:
                    new = target - r2["mass"]
                    nn = float(np.abs(new).sum())
                    if nn <= (1 - tau / 2) * norm:
                        vals, res, resid, norm = trial, r2, new, nn
                        break
            tau *= 0.5
            if tau < 1e-8:
                raise NoConvergence("line search failed", history)
    full = np.zeros(len(z.points))
    full[sub] = vals
    passive = ~(active_mask | z.boundary)
    if passive.any():
        env, _ = envelope_values(res["hull"], z.points[passive])
        full[passive] = env
    masses = np.zeros(len(z.points))
    masses[act] = res["mass"]
    out = z.with_values(full)
    out.info.update(history=history, targets=m, masses=masses, active=active_mask,
                    iterations=len(history) - 1, theta=theta)
    return out


def _cut(f: ScalarField, support):
    pieces = []
    for rec in f.pieces:
        r = rec.copy()
        c = float(np.linalg.norm(r[8:8 + f.d]))
        if c > 0 and r[5] > support - c:
            raise ValueError("data must be supported in B_2 or centred at the origin")
        r[5] = min(r[5], support)
        pieces.append(r)
    return ScalarField(f.d, tuple(pieces), {}, f"{f.label}*I[B_{support:g}]")


def conservation_residual(z: GridConvexFunction) -> float:
    """``|sum of cell masses - sum of targets| / sum of targets``, both recomputed."""
    t = float(z.info["targets"].sum())
    if t == 0:
        return 0.0
    theta = z.info.get("theta", 0)
    cells = subgradient_measure(z, theta, nodes=np.flatnonzero(z.info["active"]), check=False)
    return abs(sum(c.mass for c in cells) - t) / t


# -------------------------------------------------------- verification


def _support_mass(f: ScalarField, support=SUPPORT):
    from .model import Domain, lp_norm
    if f.is_zero:
        return 0.0
    return lp_norm(_cut(f, support), Domain.ball(support, f.d), f.d) ** f.d


def _N_for(t, theta, d):
    # smallest N with 8 Phi(t) <= N t^(1/d) [exp(N t)]
    target = 8 * phi_inverse(t, theta, d)
    base = t ** (1.0 / d)
    if theta == 0:
        return target / base
    g = lambda N: N * base * math.exp(N * t) - target
    hi = target / base
    return optimize.brentq(g, 0.0, hi, xtol=1e-14)


@dataclass
class BarrierReport:
    name: str
    holds: bool
    lhs: float
    rhs: float
    margin: float
    details: dict

    def as_dict(self):
        from .estimate import _clean
        return _clean({"name": self.name, "holds": self.holds, "lhs": self.lhs, "rhs": self.rhs,
                       "margin": self.margin, "details": self.details})


def verify_bound_22(z: GridConvexFunction, f: ScalarField, theta=0, t_grid=None) -> BarrierReport:
    """``max |z| <= 8 Phi(int_{B_2} f^d)`` and the smallest constant in the growth bounds of ``8 Phi``."""
    d = z.d
    t = _support_mass(f)
    lhs = z.max_abs()
    rhs = 8 * phi_inverse(t, theta, d)
    tg = np.geomspace(1e-3, 10.0, 41) if t_grid is None else np.asarray(t_grid)
    Ns = [_N_for(float(s), theta, d) for s in tg]
    return BarrierReport("bound", bool(lhs <= rhs * (1 + 1e-12)), lhs, rhs, rhs - lhs,
                         {"int_f_d": t, "theta": theta, "smallest_N_d": max(Ns), "t_grid": [tg[0], tg[-1]]})


def hat_kernel(eps, h, d=2):
    """Discrete radial hat ``(1 - |x|/eps)_+`` on the lattice, normalized to unit mass."""
    m = int(math.floor(eps / h))
    ax = np.arange(-m, m + 1) * h
    mesh = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1)
    k = np.clip(1 - np.linalg.norm(mesh, axis=-1) / eps, 0, None)
    return k / k.sum()


def random_psd(n, d=2, seed=0):
    """``n`` random nonnegative symmetric matrices, every third one rank deficient."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        rank = d if i % 3 else rng.integers(0, d)
        G = rng.normal(size=(d, max(rank, 0)))
        a = G @ G.T if rank else np.zeros((d, d))
        if rank and i % 3:
            a += 0.05 * np.eye(d)
        out.append(a)
    return out


def _hessian(Z, h):
    Zxx = (Z[2:, 1:-1] - 2 * Z[1:-1, 1:-1] + Z[:-2, 1:-1]) / h**2
    Zyy = (Z[1:-1, 2:] - 2 * Z[1:-1, 1:-1] + Z[1:-1, :-2]) / h**2
    Zxy = (Z[2:, 2:] - Z[2:, :-2] - Z[:-2, 2:] + Z[:-2, :-2]) / (4 * h * h)
    return Zxx, Zxy, Zyy


def verify_subsolution_23(z: GridConvexFunction, f: ScalarField, theta=0, a_list=None,
                          eps_list=(0.25,), tol_factor=1.0, support=SUPPORT) -> BarrierReport:
    """``a : D^2 z_eps >= d det(a)^(1/d) (f (1 + theta |Dz|))_eps`` at lattice nodes of ``B_{2 - eps}``.

    ``z_eps`` and the right-hand side are discrete convolutions with the hat
    kernel; derivatives are central differences.  The admissible defect is
    ``tol_factor * (h / eps^2) * h * (tr(a) L + d det(a)^(1/d) G)`` with
    ``L = sup |Dz|`` and ``G = sup f (1 + theta |Dz|)`` over ``B_2``: the
    mollified Hessian is of size ``L / eps`` and its central differences
    err by ``O(h^2 L / eps^3)``.
    """
    if z.d != 2:
        raise NotImplementedError("d = 2 only")
    d = 2
    h = z.h
    a_list = random_psd(50, d) if a_list is None else a_list
    Z, ax = z.as_array()
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    R = np.hypot(X, Y)
    fc = f if f.is_zero else _cut(f, support)
    fv = fc(np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)
    gx, gy = np.gradient(np.nan_to_num(Z), h)
    g = fv * (1 + theta * np.hypot(gx, gy))
    g = np.where(np.isnan(Z), 0.0, g)
    gsup = float(np.max(g[R < support])) if np.any(g) else 0.0
    lip = float(np.max(np.hypot(gx, gy)[(R < support) & ~np.isnan(Z)]))
    worst = math.inf
    where = None
    rows = []
    for eps in eps_list:
        if eps < 2 * h:
            raise ValueError("mollifier radius below two grid spacings")
        if not 0 < eps < 2:
            raise ValueError("eps must lie in (0, 2)")
        K = hat_kernel(eps, h)
        Ze = ndimage.convolve(np.nan_to_num(Z), K, mode="constant")
        ge = ndimage.convolve(g, K, mode="constant")
        Hxx, Hxy, Hyy = _hessian(Ze, h)
        inner = (R[1:-1, 1:-1] < support - eps)
        ge_in = ge[1:-1, 1:-1]
        for a in a_list:
            lhs = a[0, 0] * Hxx + 2 * a[0, 1] * Hxy + a[1, 1] * Hyy
            c = d * max(np.linalg.det(a), 0.0) ** (1.0 / d)
            rhs = c * ge_in
            tol = tol_factor * (h / eps**2) * h * (np.trace(a) * lip + c * gsup)
            marg = (lhs - rhs)[inner] + tol
            j = int(np.argmin(marg))
            mv = float(marg[j])
            rows.append([eps, float(a[0, 0]), float(a[0, 1]), float(a[1, 1]), mv, tol])
            if mv < worst:
                worst = mv
                ii = np.argwhere(inner)[j]
                where = [float(X[1:-1, 1:-1][tuple(ii)]), float(Y[1:-1, 1:-1][tuple(ii)])]
    return BarrierReport("subsolution", bool(worst >= 0), float("nan"), float("nan"), worst,
                         {"worst_location": where, "rows": rows,
                          "columns": ["eps", "a11", "a12", "a22", "margin_after_tolerance", "tolerance"]})


def verify_amgm_chain(z: GridConvexFunction, theta=None, a_list=None, eps=0.25, tol_factor=1.0) -> BarrierReport:
    """Measure-level AM-GM: ``(1/d) a : D^2 z_eps >= det(a)^(1/d) (rho^(1/d))_eps``.

    ``rho`` is the weighted cell mass of each node divided by its lattice
    cell volume, so the right-hand side only sees the Monge-Ampere masses,
    not the data.  Both sides are mollified by the hat kernel and compared
    at nodes of ``B_{radius - 1 - eps}``, with the tolerance of
    :func:`verify_subsolution_23`.
    """
    if z.d != 2:
        raise NotImplementedError("d = 2 only")
    d = 2
    h = z.h
    theta = z.info.get("theta", 0) if theta is None else theta
    if eps < 2 * h:
        raise ValueError("mollifier radius below two grid spacings")
    a_list = random_psd(50, d) if a_list is None else a_list
    cells = subgradient_measure(z, theta)
    mass = np.zeros(len(z.points))
    mass[[c.node for c in cells]] = [c.mass for c in cells]
    Z, ax = z.as_array()
    rho = np.full(Z.shape, 0.0)
    k = np.rint(z.points[~z.boundary] / h).astype(int) + (len(ax) - 1) // 2
    rho[tuple(k.T)] = np.maximum(mass[~z.boundary], 0.0) ** (1.0 / d) / h
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    R = np.hypot(X, Y)
    gx, gy = np.gradient(np.nan_to_num(Z), h)
    lip = float(np.max(np.hypot(gx, gy)[~np.isnan(Z)]))
    K = hat_kernel(eps, h)
    Ze = ndimage.convolve(np.nan_to_num(Z), K, mode="constant")
    re = ndimage.convolve(rho, K, mode="constant")[1:-1, 1:-1]
    Hxx, Hxy, Hyy = _hessian(Ze, h)
    inner = R[1:-1, 1:-1] < z.radius - 1 - eps
    rsup = float(rho.max())
    worst = math.inf
    where = None
    for a in a_list:
        lhs = (a[0, 0] * Hxx + 2 * a[0, 1] * Hxy + a[1, 1] * Hyy) / d
        c = max(np.linalg.det(a), 0.0) ** (1.0 / d)
        tol = tol_factor * (h / eps**2) * h * (np.trace(a) * lip + d * c * rsup) / d
        marg = (lhs - c * re)[inner] + tol
        j = int(np.argmin(marg))
        if marg[j] < worst:
            worst = float(marg[j])
            ii = np.argwhere(inner)[j]
            where = [float(X[1:-1, 1:-1][tuple(ii)]), float(Y[1:-1, 1:-1][tuple(ii)])]
    return BarrierReport("amgm_chain", bool(worst >= 0), float("nan"), float("nan"), worst,
                         {"worst_location": where, "eps": eps, "matrices": len(a_list)})


def node_gradients(z: GridConvexFunction, hull: Optional[LowerHull] = None, tol=1e-10):
    """Largest subgradient norm and an averaged subgradient at every node."""
    hull = lower_hull(z.points, z.values) if hull is None else hull
    gmax = np.zeros(len(z.points))
    gavg = np.zeros((len(z.points), z.d))
    scale = tol * max(1.0, z.max_abs())
    for s in range(0, len(z.points), 1024):
        x = z.points[s:s + 1024]
        v = x @ hull.grads.T + hull.offsets
        act = v >= v.max(axis=1, keepdims=True) - scale
        nrm = np.linalg.norm(hull.grads, axis=1)
        gmax[s:s + 1024] = np.max(np.where(act, nrm[None, :], 0.0), axis=1)
        gavg[s:s + 1024] = (act @ hull.grads) / act.sum(axis=1, keepdims=True)
    return gmax, gavg


def gradient_report(z: GridConvexFunction, inner=3.0, rtol=1e-6) -> BarrierReport:
    """``|Dz(x)| <= max|z| / (radius - |x|)`` at the nodes of ``B_inner``.

    The tolerance covers the gap between ``|x| = radius`` and the inscribed
    boundary polygon, ``radius (1 - cos(pi / n_boundary))``.
    """
    gmax, _ = node_gradients(z)
    r = np.linalg.norm(z.points, axis=1)
    sel = (r < inner) & ~z.boundary
    nb = int(z.boundary.sum())
    gap = z.radius * (1 - math.cos(math.pi / nb)) if z.d == 2 else z.h
    bound = z.max_abs() / (z.radius - gap - r[sel])
    marg = bound * (1 + rtol) - gmax[sel]
    j = int(np.argmin(marg)) if sel.any() else 0
    worst = float(marg[j]) if sel.any() else 0.0
    return BarrierReport("gradient", bool(worst >= 0), float(gmax[sel][j]) if sel.any() else 0.0,
                         float(bound[j]) if sel.any() else 0.0, worst,
                         {"nodes": int(sel.sum()), "worst_point": z.points[sel][j].tolist() if sel.any() else None})


@dataclass
class CompositeBarrier:
    z1: GridConvexFunction
    z2: Optional[GridConvexFunction]
    z: GridConvexFunction
    F: float
    N_d: float
    gradient: BarrierReport


def composite_barrier(f: ScalarField, envelope: Optional[ScalarField], N_d=1.0, h=1 / 16, tol=1e-9):
    """``z = z1 + N_d F z2`` with ``z1`` solved for ``f`` (flat kernel) and ``z2`` for ``env / d`` (weighted kernel).

    ``F = (int_{B_2} f^d)^(1/d)``.  The gradient report checks ``z1``.
    """
    d = f.d
    z1 = solve_aleksandrov(f, 0, h, tol)
    F = _support_mass(f) ** (1.0 / d)
    if envelope is None or envelope.is_zero or F == 0:
        z2 = None
        z = z1.with_values(z1.values)
    else:
        z2 = solve_aleksandrov(envelope.scaled(1.0 / d), 1, h, tol)
        z = z1 + z2.scaled(N_d * F)
    return CompositeBarrier(z1, z2, z, F, N_d, gradient_report(z1))


def export_csv(z: GridConvexFunction, path, hull=None):
    """Write ``x, y[, z-coord], value, gradient`` rows for every node."""
    _, g = node_gradients(z, hull)
    names = ["x", "y", "z"][:z.d]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["value"] + ["d" + n for n in names] + ["boundary"])
        for p, v, gg, b in zip(z.points, z.values, g, z.boundary):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))] + [repr(float(c)) for c in gg] + [int(b)])
