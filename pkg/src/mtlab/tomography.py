"""Weights on ``R^n`` and their tomographic functionals.

Line integrals ``Xw(l)`` and their supremum, tube masses ``w(T)``, the
amalgam functional over tessellated tubes, and constructors for slab, flake
and ball-union weights. Grid weights are read as the piecewise-linear
interpolant of their samples for line integrals and as cell sums (cell
centre membership) for masses of solid sets.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import GeometryError
from .geometry import Tube, normal
from .grids import Grid, Weight, box_grid, load_array, save_array

__all__ = [
    "Slab",
    "Flake",
    "XrayResult",
    "AFunctionalResult",
    "TubeNet",
    "perp_basis",
    "direction_net",
    "xray_sup",
    "xray_profile",
    "xray_sup_balls",
    "ball_line_mass",
    "tube_mass",
    "perpendicular_directions",
    "tube_net",
    "a_functional",
    "tube_power_functional",
    "tessellation_sum",
    "make_slab_weight",
    "make_flake_weight",
    "make_ball_union_weight",
    "star_weight",
    "slab_parallelism",
    "save_geometry",
    "load_geometry",
    "save_weight",
    "load_weight",
]

_SLACK = 1 + 1e-9


# ---------------------------------------------------------------- shapes


@dataclass(frozen=True)
class Slab:
    """Neighbourhood of a flat ``(n-1)``-disc: ``|<x-c, nu>| <= halfwidth``, lateral radius ``radius``."""

    center: tuple
    normal: tuple
    radius: float
    halfwidth: float = 0.5

    def __post_init__(self):
        nu = np.asarray(self.normal, dtype=float)
        nn = np.linalg.norm(nu)
        if nn == 0:
            raise GeometryError("slab normal must be non-zero")
        if len(self.center) != len(nu):
            raise GeometryError("slab centre and normal differ in dimension")
        if self.radius <= 0 or self.halfwidth <= 0:
            raise GeometryError("slab radius and half-width must be positive")
        object.__setattr__(self, "normal", tuple(float(x) for x in nu / nn))
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))

    @property
    def dim(self):
        return len(self.center)

    def contains(self, x, scale=1.0):
        y = np.asarray(x, dtype=float) - np.asarray(self.center)
        t = y @ np.asarray(self.normal)
        lat2 = np.sum(y * y, axis=-1) - t * t
        return (np.abs(t) <= scale * self.halfwidth * _SLACK) & (lat2 <= (scale * self.radius) ** 2 * _SLACK)

    def dilate(self, scale):
        return Slab(self.center, self.normal, self.radius * scale, self.halfwidth * scale)

    def bbox(self, scale=1.0):
        nu = np.abs(np.asarray(self.normal))
        half = scale * (self.radius * np.sqrt(np.clip(1 - nu * nu, 0, None)) + self.halfwidth * nu)
        c = np.asarray(self.center)
        return c - half, c + half

    def to_dict(self):
        return {"center": list(self.center), "normal": list(self.normal),
                "radius": self.radius, "halfwidth": self.halfwidth}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), tuple(d["normal"]), float(d["radius"]), float(d.get("halfwidth", 0.5)))


@dataclass(frozen=True)
class Flake:
    """Neighbourhood of a graph ``x_n = Gamma(x')`` over a ball in ``R^{n-1}``.

    ``Gamma(x') = offset + <slope, x'-c> + curvature/2 |x'-c|^2``. Membership
    uses the first-order distance ``|x_n - Gamma| / sqrt(1 + |grad Gamma|^2)``.
    """

    base_center: tuple
    base_radius: float
    offset: float = 0.0
    slope: tuple = ()
    curvature: float = 0.0
    halfwidth: float = 0.5

    def __post_init__(self):
        c = tuple(float(x) for x in np.atleast_1d(self.base_center))
        slope = tuple(float(x) for x in self.slope) if len(self.slope) else (0.0,) * len(c)
        if len(slope) != len(c):
            raise GeometryError("flake slope and base centre differ in dimension")
        if self.base_radius <= 0 or self.halfwidth <= 0:
            raise GeometryError("flake radius and half-width must be positive")
        object.__setattr__(self, "base_center", c)
        object.__setattr__(self, "slope", slope)

    @property
    def dim(self):
        return len(self.base_center) + 1

    def height(self, w):
        y = np.asarray(w, dtype=float) - np.asarray(self.base_center)
        return self.offset + y @ np.asarray(self.slope) + 0.5 * self.curvature * np.sum(y * y, axis=-1)

    def grad(self, w):
        y = np.asarray(w, dtype=float) - np.asarray(self.base_center)
        return np.asarray(self.slope) + self.curvature * y

    def contains(self, x, scale=1.0):
        x = np.asarray(x, dtype=float)
        w, z = x[..., :-1], x[..., -1]
        y = w - np.asarray(self.base_center)
        inbase = np.sum(y * y, axis=-1) <= (scale * self.base_radius) ** 2 * _SLACK
        g = self.grad(w)
        dist = np.abs(z - self.height(w)) / np.sqrt(1 + np.sum(g * g, axis=-1))
        return inbase & (dist <= scale * self.halfwidth * _SLACK)

    def tangent_angle_min(self, n_samples=33):
        """Smallest angle between a tangent plane and the vertical axis over the base."""
        d = self.dim - 1
        ax = np.linspace(-1, 1, n_samples)
        pts = np.array(list(itertools.product(ax, repeat=d)))
        pts = pts[np.sum(pts * pts, axis=1) <= 1] * self.base_radius + np.asarray(self.base_center)
        gmax = float(np.max(np.linalg.norm(self.grad(pts), axis=-1)))
        return math.pi / 2 - math.atan(gmax)

    def nearly_horizontal(self, min_angle=0.02):
        return self.tangent_angle_min() >= min_angle

    def to_dict(self):
        return {"base_center": list(self.base_center), "base_radius": self.base_radius,
                "offset": self.offset, "slope": list(self.slope), "curvature": self.curvature,
                "halfwidth": self.halfwidth}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["base_center"]), float(d["base_radius"]), float(d.get("offset", 0.0)),
                   tuple(d.get("slope", ())), float(d.get("curvature", 0.0)),
                   float(d.get("halfwidth", 0.5)))


# ---------------------------------------------------------------- X-ray transform


@dataclass
class XrayResult:
    """Largest line integral found, with the line ``point + t * direction``."""

    value: float
    point: tuple = None
    direction: tuple = None
    coarse_value: float = 0.0
    n_lines: int = 0

    def __float__(self):
        return float(self.value)


def perp_basis(u):
    """Orthonormal basis (rows) of the hyperplane orthogonal to the unit vector ``u``."""
    u = np.asarray(u, dtype=float)
    if len(u) == 2:
        return np.array([[-u[1], u[0]]])
    a = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1)
    return np.stack([e1, np.cross(u, e1)])


def direction_net(n, step):
    """Unit directions (one of each antipodal pair) with angular spacing about ``step``."""
    if n == 2:
        k = max(int(math.ceil(math.pi / step)), 1)
        phi = math.pi * np.arange(k) / k
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)
    if n != 3:
        raise ValueError("only n = 2, 3 are supported")
    dirs = [np.array([0.0, 0.0, 1.0])]
    nt = max(int(math.ceil((math.pi / 2) / step)), 1)
    for i in range(1, nt + 1):
        th = (math.pi / 2) * i / nt
        k = max(int(math.ceil(2 * math.pi * math.sin(th) / step)), 1)
        ph = 2 * math.pi * np.arange(k) / k
        dirs.extend(np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph),
                              np.full(k, np.cos(th))], axis=1))
    return np.asarray(dirs)


def _line_sums(samples, grid, base, u, half_len, step):
    """Trapezoid integrals of the interpolated samples along ``base + t u``, ``|t| <= half_len``."""
    base = np.atleast_2d(base)
    n = base.shape[1]
    m = max(int(math.ceil(half_len / step)), 1)
    ts = step * np.arange(-m, m + 1)
    org = np.asarray(grid.origin)
    out = np.empty(len(base))
    chunk = max(1, 2_000_000 // len(ts))
    for i in range(0, len(base), chunk):
        b = base[i : i + chunk]
        pts = (b[:, None, :] + ts[None, :, None] * u - org) / grid.spacing
        vals = ndimage.map_coordinates(samples, pts.reshape(-1, n).T, order=1,
                                       mode="constant", cval=0.0, prefilter=False)
        vals = vals.reshape(len(b), len(ts))
        out[i : i + chunk] = (vals.sum(axis=1) - 0.5 * (vals[:, 0] + vals[:, -1])) * step
    return out


def _support_box(w, box):
    g = w.grid
    if box == "grid":
        idx_lo = np.zeros(g.ndim, dtype=int)
        idx_hi = np.asarray(g.shape) - 1
    else:
        nz = np.nonzero(w.samples > 0)
        if len(nz[0]) == 0:
            return None
        idx_lo = np.array([a.min() for a in nz])
        idx_hi = np.array([a.max() for a in nz])
    org = np.asarray(g.origin)
    lo = org + g.spacing * idx_lo
    hi = org + g.spacing * idx_hi
    center = (lo + hi) / 2
    half = float(np.linalg.norm(hi - lo) / 2 + g.spacing)
    return center, half


def _pooled(samples, grid, max_side=160):
    """Block means over ``f^n`` cells so that no side exceeds ``max_side``."""
    f = max(1, int(math.ceil(max(grid.shape) / max_side)))
    if f == 1:
        return samples, grid
    pad = [(0, (-s) % f) for s in samples.shape]
    a = np.pad(samples, pad)
    shape = []
    for s in a.shape:
        shape += [s // f, f]
    a = a.reshape(shape).mean(axis=tuple(range(1, 2 * a.ndim, 2)))
    org = np.asarray(grid.origin) + (f - 1) * grid.spacing / 2
    return a, Grid(tuple(org), f * grid.spacing, a.shape)


def _offset_lattice(d, half, step):
    k = int(math.ceil(half / step))
    ax = step * np.arange(-k, k + 1)
    if d == 1:
        return ax[:, None]
    pts = np.array(list(itertools.product(ax, repeat=d)))
    return pts[np.sum(pts * pts, axis=1) <= half * half * _SLACK]


def _pattern_search(evalf, p0, u0, ang0, off0, max_tilt=None, iters=400):
    """Coordinate pattern search over direction tilt and perpendicular offset."""
    E = perp_basis(u0)
    d = len(u0) - 1

    def line(x):
        u = u0 + x[:d] @ E
        return p0 + x[d:] @ E, u / np.linalg.norm(u)

    x = np.zeros(2 * d)
    steps = np.array([ang0] * d + [off0] * d, dtype=float)
    floor = steps / 256
    best = evalf(*line(x))
    for _ in range(iters):
        if np.all(steps <= floor):
            break
        moved = False
        for k in range(2 * d):
            if steps[k] <= floor[k]:
                continue
            for sgn in (1.0, -1.0):
                y = x.copy()
                y[k] += sgn * steps[k]
                if max_tilt is not None and np.linalg.norm(y[:d]) > max_tilt:
                    continue
                v = evalf(*line(y))
                if v > best * (1 + 1e-12) + 1e-300:
                    x, best, moved = y, v, True
                    break
        if not moved:
            steps /= 2
    p, u = line(x)
    return best, p, u


def xray_sup(w, angular_res=None, offset_res=None, refine=True, box="support",
             directions=None, angle_tol=None, n_candidates=4):
    """Largest line integral of a grid weight over sampled lines.

    Parameters
    ----------
    w : Weight
    angular_res : float, optional
        Direction spacing of the coarse net; default ``pi / (4 R_box)`` with
        ``R_box`` the half-diagonal of the box in coarse cells.
    offset_res : float, optional
        Offset spacing of the coarse net (default one coarse cell).
    refine : bool
        Pattern-search the best coarse lines on the full-resolution grid.
    box : {"support", "grid"}
        Box spanned by the net. With ``"grid"`` the net depends on the grid
        only, so the coarse value is monotone and 1-homogeneous in ``w``.
    directions : array, optional
        Restrict to these directions; refinement then tilts by at most
        ``angle_tol``.

    Returns
    -------
    XrayResult
        A lower bound for ``sup_l Xw(l)`` and the line attaining it.
    """
    n = w.grid.ndim
    sb = _support_box(w, box)
    if sb is None:
        return XrayResult(0.0)
    c0, half = sb
    S, G = _pooled(w.samples, w.grid)
    hc = G.spacing
    off = hc if offset_res is None else float(offset_res)
    if directions is None:
        ang = math.pi / (4 * max(half / hc, 1.0)) if angular_res is None else float(angular_res)
        dirs = direction_net(n, ang)
    else:
        dirs = np.atleast_2d(np.asarray(directions, dtype=float))
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        ang = angle_tol if angle_tol is not None else (angular_res or math.pi / (4 * max(half / hc, 1.0)))
    offs = _offset_lattice(n - 1, half, off)
    cands = []
    n_lines = 0
    for u in dirs:
        E = perp_basis(u)
        base = c0 + offs @ E
        vals = _line_sums(S, G, base, u, half, hc / 2)
        n_lines += len(vals)
        i = int(np.argmax(vals))
        cands.append((float(vals[i]), base[i], u))
    cands.sort(key=lambda c: -c[0])
    coarse = cands[0][0]
    step = w.grid.spacing / 2

    def evalf(p, u):
        return float(_line_sums(w.samples, w.grid, p[None, :], u, half, step)[0])

    best = XrayResult(-1.0, coarse_value=coarse, n_lines=n_lines)
    for _, p, u in cands[: max(1, n_candidates)]:
        if refine:
            tilt = angle_tol if directions is not None else None
            v, p, u = _pattern_search(evalf, p, u, ang if tilt is None else tilt / 2,
                                      max(off, w.grid.spacing), max_tilt=tilt)
        else:
            v = evalf(p, u)
        if v > best.value:
            best = XrayResult(v, tuple(p), tuple(u), coarse, n_lines)
    if not refine:
        # without refinement the reported value is the coarse-net maximum
        best.value = coarse
    return best


def xray_profile(w, u, offsets, center=None):
    """Line integrals along direction ``u`` at perpendicular ``offsets`` (full resolution)."""
    u = np.asarray(u, dtype=float)
    u = u / np.linalg.norm(u)
    sb = _support_box(w, "grid")
    c0 = sb[0] if center is None else np.asarray(center, dtype=float)
    half = sb[1] + float(np.linalg.norm(c0 - sb[0]))
    offs = np.asarray(offsets, dtype=float).reshape(len(offsets), -1)
    base = c0 + offs @ perp_basis(u)
    return _line_sums(w.samples, w.grid, base, u, half, w.grid.spacing / 2)


def ball_line_mass(centers, radius, p, u):
    """Length of a line inside a union of disjoint balls: ``sum 2 sqrt(r^2 - d_i^2)``."""
    y = np.asarray(centers, dtype=float) - np.asarray(p, dtype=float)
    s = y @ np.asarray(u, dtype=float)
    d2 = np.sum(y * y, axis=-1) - s * s
    return float(np.sum(2 * np.sqrt(np.clip(radius * radius - d2, 0, None))))


def _candidate_masses(q, radius):
    """Chord sums for lines through each projected centre (pairs within ``radius``)."""
    m = len(q)
    mass = np.full(m, 2.0 * radius)
    if q.shape[1] == 1:
        order = np.argsort(q[:, 0], kind="stable")
        qs = q[order, 0]
        ms = np.zeros(m)
        for k in range(1, m):
            diff = qs[k:] - qs[:-k]
            ok = diff < radius
            if not ok.any():
                break
            ch = np.where(ok, 2 * np.sqrt(np.clip(radius * radius - diff * diff, 0, None)), 0.0)
            ms[k:] += ch
            ms[:-k] += ch
        mass[order] += ms
        return mass
    pairs = cKDTree(q).query_pairs(radius, output_type="ndarray")
    if len(pairs):
        dd = np.linalg.norm(q[pairs[:, 0]] - q[pairs[:, 1]], axis=1)
        ch = 2 * np.sqrt(np.clip(radius * radius - dd * dd, 0, None))
        np.add.at(mass, pairs[:, 0], ch)
        np.add.at(mass, pairs[:, 1], ch)
    return mass


def xray_sup_balls(centers, radius=1.0, angular_res=None, refine=True, n_candidates=8):
    """``sup_l Xw(l)`` for ``w`` the indicator of disjoint balls, via exact chord sums.

    Sweeps a direction net; for each direction the candidate lines pass
    through a ball centre. The best candidates are refined by pattern search.
    """
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    if C.size == 0:
        return XrayResult(0.0)
    n = C.shape[1]
    c0 = C.mean(axis=0)
    ext = float(np.max(np.linalg.norm(C - c0, axis=1))) + radius
    ang = min(math.pi / 8, radius / (2 * ext)) if angular_res is None else float(angular_res)
    dirs = direction_net(n, ang)
    cands = []
    for u in dirs:
        q = (C - c0) @ perp_basis(u).T
        mass = _candidate_masses(q, radius)
        i = int(np.argmax(mass))
        cands.append((float(mass[i]), C[i], u))
    cands.sort(key=lambda c: -c[0])
    coarse = cands[0][0]

    def evalf(p, u):
        return ball_line_mass(C, radius, p, u)

    best = XrayResult(-1.0, coarse_value=coarse, n_lines=len(dirs) * len(C))
    for _, p, u in cands[: max(1, n_candidates)]:
        if refine:
            v, p, u = _pattern_search(evalf, p, u, ang, radius / 2)
        else:
            v = evalf(p, u)
        if v > best.value:
            best = XrayResult(v, tuple(p), tuple(u), coarse, best.n_lines)
    return best


# ---------------------------------------------------------------- tube masses


def _bbox_slices(grid, lo, hi):
    org = np.asarray(grid.origin)
    a = np.floor((lo - org) / grid.spacing - 1e-9).astype(int)
    b = np.ceil((hi - org) / grid.spacing + 1e-9).astype(int)
    a = np.clip(a, 0, np.asarray(grid.shape))
    b = np.clip(b + 1, 0, np.asarray(grid.shape))
    if np.any(b <= a):
        return None
    return tuple(slice(int(i), int(j)) for i, j in zip(a, b))


def _slice_points(grid, sl):
    axes = [o + grid.spacing * np.arange(s.start, s.stop) for o, s in zip(grid.origin, sl)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _tube_bbox(T):
    u = np.abs(T.u)
    half = T.length / 2 * u + T.radius * np.sqrt(np.clip(1 - u * u, 0, None))
    return T.a - half, T.a + half


def tube_mass(w, T, power=1.0):
    """``sum w^power * cell volume`` over cells whose centre lies in ``T``."""
    lo, hi = _tube_bbox(T)
    sl = _bbox_slices(w.grid, lo, hi)
    if sl is None:
        return 0.0
    vals = w.samples[sl].ravel()
    if not np.any(vals):
        return 0.0
    inside = T.contains(_slice_points(w.grid, sl))
    return float(np.sum(vals[inside] ** power) * w.grid.cell_volume)


# ---------------------------------------------------------------- amalgam functional


def perpendicular_directions(E, patch, R):
    """Normals ``N(omega)`` over ``omega`` in ``E`` sampled at spacing ``R^{-1/2}``.

    Points are the lattice ``R^{-1/2} Z^{n-1}`` inside the caps and the domain,
    plus each cap centre (moved into the domain if needed). Rows are sorted
    lexicographically.
    """
    if not E:
        raise ValueError("E must contain at least one cap")
    step = R**-0.5
    r = patch.domain_radius * (1 - 1e-12)
    pts = set()
    for cap in E:
        c = cap.c.copy()
        if np.linalg.norm(c) > r:
            c *= r / np.linalg.norm(c)
        pts.add(tuple(np.round(c, 12)))
        k = int(math.ceil(cap.radius / step))
        base = np.round(cap.c / step).astype(int)
        for off in itertools.product(range(-k - 1, k + 2), repeat=patch.d):
            p = (base + np.asarray(off)) * step
            if np.linalg.norm(p - cap.c) <= cap.radius * _SLACK and np.linalg.norm(p) <= r:
                pts.add(tuple(np.round(p, 12)))
    om = np.array(sorted(pts))
    dirs = normal(patch, om)
    keys = np.round(dirs, 12)
    _, first = np.unique(keys, axis=0, return_index=True)
    dirs = dirs[np.sort(first)]
    order = np.lexsort(dirs.T[::-1])
    return dirs[order]


@dataclass
class TubeNet:
    """Tubes of radius ``R^{1/2}`` and length ``R`` in the given directions.

    Centres are ``a u + sum_k y_k e_k`` with ``a`` and ``y`` on the lattice
    ``(R^{1/2}/2) Z`` and ``|centre| <= R``. Enumeration is ordered by
    direction (rows of ``directions``), then ``y``, then ``a``.
    """

    R: float
    directions: np.ndarray

    @property
    def radius(self):
        return self.R**0.5

    @property
    def length(self):
        return float(self.R)

    def offsets(self, n):
        sp = self.R**0.5 / 2
        k = int(math.floor(self.R / sp + 1e-9))
        ax = sp * np.arange(-k, k + 1)
        rows = [y + (a,) for y in itertools.product(ax, repeat=n - 1) for a in ax]
        rows = np.asarray(rows)
        keep = np.sum(rows * rows, axis=1) <= self.R**2 * _SLACK
        return rows[keep]

    def frames(self):
        """Yield ``(u, basis, offsets)`` per direction; offsets rows are ``(y..., a)``."""
        for u in self.directions:
            yield u, perp_basis(u), self.offsets(len(u))

    def tubes(self):
        out = []
        for u, E, offs in self.frames():
            for row in offs:
                c = row[-1] * u + row[:-1] @ E
                out.append(Tube(tuple(c), tuple(u), self.radius, self.length))
        return out

    def __len__(self):
        return sum(len(o) for _, _, o in self.frames())


def tube_net(E, patch, R):
    return TubeNet(float(R), perpendicular_directions(E, patch, R))


@dataclass
class AFunctionalResult:
    """Value of the amalgam functional, its maximising tube and the Hölder factors."""

    value: float
    tube: Tube = None
    piece_density_sup: float = 0.0
    tube_mass_sup: float = 0.0
    n_tubes: int = 0

    def __float__(self):
        return float(self.value)


def _piece_volume(rho, n, cell_volume):
    nominal = rho ** ((n + 1) / 2)
    return (cell_volume, True) if nominal <= cell_volume * (1 + 1e-12) else (nominal, False)


def _piece_masses(s_rel, dy, m, R, rho, n, end_minus, cells):
    """Masses of the tessellation pieces of one tube (cells: piece per cell)."""
    if cells:
        return m
    r = R**0.5
    nl = max(int(math.ceil(R / rho - 1e-9)), 1)
    nc = max(int(math.ceil(2 * r / rho**0.5 - 1e-9)), 1)
    along = (s_rel + R / 2) if end_minus else (R / 2 - s_rel)
    ka = np.clip(np.floor(along / rho + 1e-9).astype(int), 0, nl - 1)
    key = ka
    for k in range(n - 1):
        kc = np.clip(np.floor((dy[:, k] + r) / rho**0.5 + 1e-9).astype(int), 0, nc - 1)
        key = key * nc + kc
    _, inv = np.unique(key, return_inverse=True)
    return np.bincount(inv, weights=m)


def _end_minus(row, R):
    """True if the tube end at ``a - R/2`` is the one nearer the origin (ties: minus)."""
    a = row[-1]
    return abs(a - R / 2) >= abs(a + R / 2)


def a_functional(w, rho, R, E, patch, net=None):
    """``rho^{-(n-1)/2} sup_T (sum_{S subset T} w(S)^{(n+1)/2})^{2/(n+1)}``.

    ``T`` runs over the :class:`TubeNet` perpendicular to ``E``. Each tube is
    tessellated by boxes ``S`` of length ``rho`` along the axis and side
    ``rho^{1/2}`` across, anchored at the tube end nearest the origin and at
    the tube boundary; ``|S| = rho^{(n+1)/2}``. When that volume does not
    exceed a grid cell, every cell is its own piece. Cells are assigned by
    their centres. Ties keep the first tube in enumeration order.
    """
    if not 1 <= rho <= R * _SLACK:
        raise ValueError("need 1 <= rho <= R")
    net = tube_net(E, patch, R) if net is None else net
    n = w.grid.ndim
    cv = w.grid.cell_volume
    vol, cells = _piece_volume(rho, n, cv)
    p = (n + 1) / 2
    supp = w.samples > 0
    pts = w.grid.points()[supp.ravel()]
    mass = w.samples[supp] * cv
    r = R**0.5
    best = AFunctionalResult(0.0, n_tubes=0)
    best_sum = -1.0
    dens_sup = 0.0
    mass_sup = 0.0
    count = 0
    for u, Eb, offs in net.frames():
        s = pts @ u
        Y = pts @ Eb.T
        order = np.argsort(Y[:, 0], kind="stable")
        y0 = Y[order, 0]
        for row in offs:
            count += 1
            lo = np.searchsorted(y0, row[0] - r * _SLACK, side="left")
            hi = np.searchsorted(y0, row[0] + r * _SLACK, side="right")
            if hi <= lo:
                continue
            idx = order[lo:hi]
            s_rel = s[idx] - row[-1]
            dy = Y[idx] - row[:-1]
            keep = (np.abs(s_rel) <= R / 2 * _SLACK) & (np.sum(dy * dy, axis=1) <= r * r * _SLACK)
            if not np.any(keep):
                continue
            pm = _piece_masses(s_rel[keep], dy[keep], mass[idx][keep], R, rho, n,
                               _end_minus(row, R), cells)
            total = float(np.sum(pm**p))
            dens_sup = max(dens_sup, float(pm.max()) / vol)
            mass_sup = max(mass_sup, float(pm.sum()))
            if total > best_sum:
                best_sum = total
                c = row[-1] * u + row[:-1] @ Eb
                best.tube = Tube(tuple(c), tuple(u), r, float(R))
    best.n_tubes = count
    best.piece_density_sup = dens_sup
    best.tube_mass_sup = mass_sup
    if best_sum > 0:
        best.value = rho ** (-(n - 1) / 2) * best_sum ** (2 / (n + 1))
    return best


def tube_power_functional(w, R, E, patch, net=None):
    """``sup_T (int_T w^{(n+1)/2})^{2/(n+1)}`` over the :class:`TubeNet` perpendicular to ``E``.

    Each tube is evaluated independently by :func:`tube_mass`.
    """
    net = tube_net(E, patch, R) if net is None else net
    n = w.grid.ndim
    p = (n + 1) / 2
    best = AFunctionalResult(0.0)
    best_v = -1.0
    count = 0
    for T in net.tubes():
        count += 1
        v = tube_mass(w, T, power=p)
        if v > best_v:
            best_v, best.tube = v, T
    best.n_tubes = count
    best.value = max(best_v, 0.0) ** (2 / (n + 1))
    return best


def tessellation_sum(w, T, rho):
    """``sum_S (w(S)/|S|)^{(n+1)/2} |S|`` over the pieces of one tube of length ``R = T.length``."""
    n = w.grid.ndim
    R = T.length
    if abs(T.radius - R**0.5) > 1e-9 * R:
        raise GeometryError("tessellation needs a tube of radius length^{1/2}")
    vol, cells = _piece_volume(rho, n, w.grid.cell_volume)
    lo, hi = _tube_bbox(T)
    sl = _bbox_slices(w.grid, lo, hi)
    if sl is None:
        return 0.0
    pts = _slice_points(w.grid, sl)
    m = w.samples[sl].ravel() * w.grid.cell_volume
    inside = T.contains(pts)
    if not np.any(inside & (m > 0)):
        return 0.0
    y = pts[inside] - T.a
    s_rel = y @ T.u
    dy = y @ perp_basis(T.u).T
    row = np.array([T.a @ T.u])
    pm = _piece_masses(s_rel, dy, m[inside], R, rho, n, _end_minus(row, R), cells)
    return float(np.sum((pm / vol) ** ((n + 1) / 2)) * vol)


# ---------------------------------------------------------------- constructors


def _target_grid(grid, R, n, spacing):
    if grid is not None:
        return grid
    if R is None or n is None:
        raise ValueError("give a grid or both R and n")
    return box_grid(R, n, spacing)


def _raster(grid, shape, scale=1.0, lo=None, hi=None):
    """Boolean mask of cells whose centres lie in ``shape`` (scaled)."""
    mask = np.zeros(grid.shape, dtype=bool)
    if lo is None:
        sl = tuple(slice(0, s) for s in grid.shape)
    else:
        sl = _bbox_slices(grid, lo, hi)
        if sl is None:
            return mask
    inside = shape.contains(_slice_points(grid, sl), scale)
    mask[sl] = inside.reshape(tuple(s.stop - s.start for s in sl))
    return mask


def _slab_items(items):
    out = []
    for it in items:
        s, c = (it, 1.0) if isinstance(it, Slab) else (it[0], float(it[1]))
        if c < 0:
            raise GeometryError("slab coefficients must be non-negative")
        out.append((s, c))
    return out


def make_slab_weight(items, grid=None, *, R=None, n=None, spacing=1.0, scale=1.0, require_disjoint=True):
    """``sum c_s chi_{scale * s}`` rasterised by cell centres.

    ``items`` holds slabs or ``(slab, coeff)`` pairs. With
    ``require_disjoint`` (and ``scale == 1``) a cell covered twice raises
    :class:`GeometryError`.
    """
    items = _slab_items(items)
    if n is None and items:
        n = items[0][0].dim
    grid = _target_grid(grid, R, n, spacing)
    out = np.zeros(grid.shape)
    hits = np.zeros(grid.shape, dtype=np.int32)
    for s, c in items:
        lo, hi = s.bbox(scale)
        m = _raster(grid, s, scale, lo, hi)
        out[m] += c
        hits += m
    if require_disjoint and scale == 1.0 and np.any(hits > 1):
        raise GeometryError("slabs overlap")
    meta = {"kind": "slabs", "scale": scale,
            "slabs": [dict(s.to_dict(), coeff=c) for s, c in items]}
    return Weight(grid, out, meta=meta)


def star_weight(items, grid, factor=3.0):
    """The companion ``w* = sum c_s chi_{factor * s}``."""
    return make_slab_weight(items, grid, scale=factor, require_disjoint=False)


def make_flake_weight(flakes, grid=None, *, R=None, n=None, spacing=1.0, min_angle=0.02, coeffs=None):
    """Sum of flake indicators; every flake must be nearly horizontal."""
    flakes = list(flakes)
    if n is None and flakes:
        n = flakes[0].dim
    grid = _target_grid(grid, R, n, spacing)
    coeffs = [1.0] * len(flakes) if coeffs is None else list(coeffs)
    out = np.zeros(grid.shape)
    for f, c in zip(flakes, coeffs):
        if not f.nearly_horizontal(min_angle):
            raise GeometryError(f"flake tangent planes come within {f.tangent_angle_min():.3g} rad of vertical")
        out[_raster(grid, f)] += c
    meta = {"kind": "flakes", "flakes": [f.to_dict() for f in flakes], "coeffs": coeffs}
    return Weight(grid, out, meta=meta)


class _Ball:
    def __init__(self, c, r):
        self.c = np.asarray(c, dtype=float)
        self.r = r

    def contains(self, x, scale=1.0):
        return np.sum((x - self.c) ** 2, axis=-1) <= (scale * self.r) ** 2 * _SLACK


def make_ball_union_weight(centers, radius=1.0, grid=None, *, R=None, spacing=1.0):
    """Indicator of a union of balls, rasterised by cell centres."""
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    n = C.shape[1]
    grid = _target_grid(grid, R, n, spacing)
    mask = np.zeros(grid.shape, dtype=bool)
    for c in C:
        mask |= _raster(grid, _Ball(c, radius), 1.0, c - radius, c + radius)
    meta = {"kind": "balls", "radius": radius, "centers": C.tolist()}
    return Weight(grid, mask.astype(float), meta=meta)


def slab_parallelism(slab, patch, n_samples=41):
    """``nu``: smallest angle between a sampled surface normal and the slab plane."""
    d = patch.d
    ax = np.linspace(-1, 1, n_samples) * patch.domain_radius * (1 - 1e-9)
    pts = np.array(list(itertools.product(ax, repeat=d)))
    pts = pts[np.linalg.norm(pts, axis=1) < patch.domain_radius]
    N = normal(patch, pts)
    return float(np.min(np.arcsin(np.clip(np.abs(N @ np.asarray(slab.normal)), 0, 1))))


# ---------------------------------------------------------------- file formats


def save_geometry(path, slabs=(), flakes=(), balls=None, radius=1.0):
    """JSON geometry file: slabs (with coefficients), flakes and ball centres."""
    doc = {
        "slabs": [dict(s.to_dict(), coeff=c) for s, c in _slab_items(slabs)],
        "flakes": [f.to_dict() for f in flakes],
    }
    if balls is not None:
        doc["balls"] = {"radius": radius, "centers": np.asarray(balls, dtype=float).tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_geometry(path):
    with open(path) as fh:
        doc = json.load(fh)
    out = {
        "slabs": [(Slab.from_dict(d), float(d.get("coeff", 1.0))) for d in doc.get("slabs", [])],
        "flakes": [Flake.from_dict(d) for d in doc.get("flakes", [])],
    }
    if "balls" in doc:
        out["balls"] = (np.asarray(doc["balls"]["centers"], dtype=float), float(doc["balls"]["radius"]))
    return out


def save_weight(path, w):
    save_array(path, w.grid, w.samples)


def load_weight(path, regular=False):
    """Read a weight; negative or non-finite samples are rejected by :class:`Weight`."""
    grid, samples = load_array(path)
    if np.iscomplexobj(samples):
        raise ValueError(f"{path}: weights must be real")
    return Weight(grid, samples, regular=regular)
