"""Both sides of weighted restriction inequalities, richness levels, decoupling checks and exponent fits.

Every check evaluates ``Eg`` on the unit box grid of ``B_R`` and compares
``int_{B_R} |Eg|^2 w`` (or an ``L^p`` norm) against the right-hand-side
functionals of :mod:`mtlab.tomography`. Nothing here proves an inequality:
the outputs are measured ratios, and the asserted bounds are explicit
constants chosen for desk-scale runs.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, GeometryError
from .extension import extend_fast_grid, weighted_l2
from .geometry import Cap, Tube, cap_cover, normal
from .tomography import (
    a_functional,
    make_flake_weight,
    make_slab_weight,
    perp_basis,
    perpendicular_directions,
    slab_parallelism,
    star_weight,
    tube_power_functional,
    tube_net,
    xray_profile,
    xray_sup,
)
from .wavepacket import decompose

__all__ = [
    "MTReport",
    "RichnessPartition",
    "ExponentFit",
    "support_caps",
    "mt_report",
    "richness_partition",
    "ball_tube_meets",
    "refined_decoupling_check",
    "slab_decoupling_check",
    "flake_mt_check",
    "fit_exponent",
    "sweep",
    "write_reports",
    "VARIANTS",
]

VARIANTS = ("xray", "xray_perp", "tube_power", "a_rho")


@dataclass
class MTReport:
    """Left side ``int_{B_R} |Eg|^2 w`` and the right-hand sides it is compared with."""

    lhs: float
    rhs_variants: dict
    ratios: dict
    R: float
    rho: float
    n: int
    g_norm2: float = 0.0
    argmax_tube: Tube = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, lhs, rhs, R, rho, n, g_norm2, argmax_tube=None, meta=None):
        ratios = {k: (lhs / v if v > 0 else 0.0) for k, v in rhs.items()}
        for k, r in ratios.items():
            if not (math.isfinite(r) and r >= 0):
                raise ValueError(f"ratio {k} is not a finite non-negative number")
        return cls(float(lhs), dict(rhs), ratios, float(R), float(rho), int(n), float(g_norm2),
                   argmax_tube, dict(meta or {}))

    def row(self, scenario=""):
        out = {"scenario": scenario, "n": self.n, "R": self.R, "rho": self.rho, "lhs": self.lhs}
        for k in sorted(self.rhs_variants):
            out[f"rhs_{k}"] = self.rhs_variants[k]
        for k in sorted(self.ratios):
            out[f"ratio_{k}"] = self.ratios[k]
        return out

    def to_json(self):
        doc = self.row()
        doc.pop("scenario")
        if self.argmax_tube is not None:
            T = self.argmax_tube
            doc["argmax_tube"] = {"anchor": list(T.anchor), "direction": list(T.direction),
                                  "radius": T.radius, "length": T.length}
        doc["meta"] = self.meta
        return doc


def support_caps(g, R, tol=0.0):
    """Caps of radius ``R^{-1/2}/2`` on the lattice ``R^{-1/2} Z^{n-1}`` meeting ``supp g``.

    Together they stand for ``supp g`` when selecting perpendicular lines and
    tubes; samples with ``|g| <= tol * max|g|`` count as zero.
    """
    a = np.abs(g.samples)
    if not np.any(a > 0):
        return []
    pts = g.omega()[a > tol * a.max()]
    step = R**-0.5
    keys = np.unique(np.round(pts / step).astype(int), axis=0)
    return [Cap(tuple(k * step), step / 2) for k in keys]


def mt_report(g, w, R, rho=1.0, E=None, field=None, variants=VARIANTS, stein=False, xray_kw=None):
    """Compare ``int_{B_R} |Eg|^2 w`` with ``||g||_2^2`` times each tomographic functional.

    Parameters
    ----------
    g : Density
    w : Weight
        On the unit box grid of ``B_R``.
    R, rho : float
    E : list of Cap, optional
        Stand-in for ``supp g`` (default :func:`support_caps`).
    field : Field, optional
        Precomputed ``Eg`` on ``w``'s grid.
    variants : iterable of str
        Any of ``xray``, ``xray_perp``, ``tube_power``, ``a_rho``.
    stein : bool
        Also emit ``int |g(xi)|^2 sup_{l || N(xi)} Xw(l) d xi``.
    """
    n = g.patch.dim
    if w.grid.ndim != n:
        raise GeometryError("weight and density dimensions differ")
    gn2 = g.norm2()
    if field is None:
        field = extend_fast_grid(g, R, w.grid.spacing)
    lhs = weighted_l2(field, w, R)
    if gn2 == 0:
        return MTReport.build(0.0, {k: 0.0 for k in variants}, R, rho, n, 0.0)
    E = support_caps(g, R) if E is None else E
    xray_kw = dict(xray_kw or {})
    rhs = {}
    tube = None
    net = tube_net(E, g.patch, R) if {"tube_power", "a_rho"} & set(variants) else None
    if "xray" in variants or "xray_perp" in variants:
        perp = xray_sup(w, directions=perpendicular_directions(E, g.patch, R),
                        angle_tol=R**-0.5, **xray_kw).value
        if "xray_perp" in variants:
            rhs["xray_perp"] = perp * gn2
        if "xray" in variants:
            # a perpendicular line is a line, so the free search is floored by it
            rhs["xray"] = max(xray_sup(w, **xray_kw).value, perp) * gn2
    if "tube_power" in variants:
        res = tube_power_functional(w, R, E, g.patch, net=net)
        rhs["tube_power"] = res.value * gn2
        tube = res.tube
    if "a_rho" in variants:
        res = a_functional(w, rho, R, E, g.patch, net=net)
        rhs["a_rho"] = res.value * gn2
        tube = tube if tube is not None else res.tube
    if stein:
        rhs["stein"] = _stein_rhs(g, w, R)
    return MTReport.build(lhs, rhs, R, rho, n, gn2, tube)


def _stein_rhs(g, w, R):
    """``sum_xi |g(xi)|^2 sup_{l || N(xi)} Xw(l)``, with ``xi`` grouped on the lattice ``R^{-1/2}/2``."""
    a2 = np.abs(g.samples) ** 2 * g.cell_volume
    nz = a2 > 0
    pts = g.omega()[nz]
    mass = a2[nz]
    step = R**-0.5 / 2
    keys, inv = np.unique(np.round(pts / step).astype(int), axis=0, return_inverse=True)
    inv = inv.ravel()
    r = g.patch.domain_radius * (1 - 1e-12)
    n = g.patch.dim
    h = w.grid.spacing
    half = float(np.max(np.abs(np.asarray(w.grid.origin)))) * math.sqrt(n)
    k = int(math.ceil(half / (h / 2)))
    ax = (h / 2) * np.arange(-k, k + 1)
    offs = ax[:, None] if n == 2 else np.stack(np.meshgrid(ax[::2], ax[::2], indexing="ij"), -1).reshape(-1, 2)
    total = 0.0
    for j, key in enumerate(keys):
        om = key * step
        if np.linalg.norm(om) > r:
            om = om * r / np.linalg.norm(om)
        u = normal(g.patch, om)
        sup = float(np.max(xray_profile(w, u, offs, center=np.zeros(n))))
        total += sup * float(mass[inv == j].sum())
    return total


# ---------------------------------------------------------------- richness


def ball_tube_meets(centers, radius, T):
    """Whether closed balls meet the solid cylinder ``T`` (exact distance test)."""
    y = np.asarray(centers, dtype=float) - T.a
    s = y @ T.u
    perp = np.sqrt(np.clip(np.sum(y * y, axis=-1) - s * s, 0, None))
    ds = np.clip(np.abs(s) - T.length / 2, 0, None)
    dr = np.clip(perp - T.radius, 0, None)
    return ds * ds + dr * dr <= radius * radius * (1 + 1e-9)


@dataclass
class RichnessPartition:
    """``R^{1/2}``-ball cover of ``B_R`` with tube-incidence counts.

    ``levels[j]`` lists the balls with count in ``[2^j, 2^{j+1})``.
    """

    R: float
    centers: np.ndarray
    radius: float
    counts: np.ndarray
    tube_counts: np.ndarray
    levels: dict

    @property
    def incidences_ballwise(self):
        return int(self.counts.sum())

    @property
    def incidences_tubewise(self):
        return int(self.tube_counts.sum())

    def level_of(self, k):
        return int(math.floor(math.log2(k))) if k >= 1 else None

    def balls(self, j):
        return self.levels.get(j, np.zeros(0, dtype=int))


def _ball_lattice(R, n):
    r = R**0.5
    sp = 2 * r / math.sqrt(n)
    k = int(math.ceil((R + r) / sp))
    ax = sp * np.arange(-k, k + 1)
    pts = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1).reshape(-1, n)
    return pts[np.linalg.norm(pts, axis=1) <= R + r], r


def richness_partition(tubes, R, centers=None, radius=None):
    """Incidences between tubes and a lattice cover of ``B_R`` by ``R^{1/2}``-balls.

    The lattice has spacing ``2 R^{1/2} / sqrt(n)``, so the balls cover
    ``B_R``. Counts are computed twice, once per ball and once per tube.
    """
    tubes = list(tubes)
    if centers is None:
        n = len(tubes[0].anchor) if tubes else 2
        centers, radius = _ball_lattice(R, n)
    centers = np.asarray(centers, dtype=float)
    counts = np.zeros(len(centers), dtype=np.int64)
    for i, c in enumerate(centers):
        counts[i] = sum(bool(ball_tube_meets(c[None], radius, T)[0]) for T in tubes)
    tube_counts = np.array([int(ball_tube_meets(centers, radius, T).sum()) for T in tubes], dtype=np.int64)
    levels = {}
    pos = np.nonzero(counts > 0)[0]
    if len(pos):
        js = np.floor(np.log2(counts[pos])).astype(int)
        for j in np.unique(js):
            levels[int(j)] = pos[js == j]
    return RichnessPartition(float(R), centers, float(radius), counts, tube_counts, levels)


def _norm_class(pset):
    """Packets in the dyadic norm class ``[2^j, 2^{j+1})`` carrying the most mass."""
    idx = pset.indices()
    norms = np.array([math.sqrt(pset[i].norm2) for i in idx])
    js = np.floor(np.log2(norms)).astype(int)
    mass = {}
    for j, nn in zip(js, norms):
        mass[j] = mass.get(j, 0.0) + nn * nn
    jbest = max(mass, key=lambda j: (mass[j], j))
    return [i for i, j in zip(idx, js) if j == jbest], jbest


@dataclass
class RefinedDecouplingResult:
    """Per dyadic richness level: ``||Eg_T||_{L^p(U_k)} / ((k/#T)^{1/(n+1)} ||g_T||_2)``."""

    ratios: dict
    n_tubes: int
    norm_class: int
    p: float
    partition: RichnessPartition = None

    @property
    def max_ratio(self):
        return max(self.ratios.values()) if self.ratios else float("nan")


def refined_decoupling_check(g, R, pset=None, delta=0.05, indices=None):
    """Refined decoupling ratios on the richness levels of equal-norm packets.

    Packets are restricted to the dyadic norm class with the largest total
    mass (unless ``indices`` is given). Grid points of ``B_R`` are assigned
    to the nearest ball of the cover; ``U_k`` is the union of the cells of
    level ``k = 2^j``. ``p = 2(n+1)/(n-1)``.
    """
    pset = decompose(g, R, delta) if pset is None else pset
    n = g.patch.dim
    p = 2 * (n + 1) / (n - 1)
    if indices is None:
        indices, jcls = _norm_class(pset)
    else:
        jcls = None
    if not indices:
        return RefinedDecouplingResult({}, 0, jcls, p)
    tubes = pset.tubes(indices)
    part = richness_partition(tubes, R)
    gT = pset.density(indices)
    F = extend_fast_grid(gT, R, 1.0)
    pts = F.grid.points()
    inball = np.sum(pts * pts, axis=1) <= R * R
    from scipy.spatial import cKDTree

    _, owner = cKDTree(part.centers).query(pts[inball])
    vals = np.abs(F.samples).ravel()[inball] ** p
    level_of_ball = np.full(len(part.centers), -1)
    for j, balls in part.levels.items():
        level_of_ball[balls] = j
    lv = level_of_ball[owner]
    gn = gT.norm()
    ratios = {}
    for j in sorted(part.levels):
        sel = lv == j
        if not np.any(sel):
            continue
        k = 2**j
        lp = float(vals[sel].sum() * F.grid.cell_volume) ** (1 / p)
        ratios[k] = lp / ((k / len(indices)) ** (1 / (n + 1)) * gn)
    return RefinedDecouplingResult(ratios, len(indices), jcls, p, part)


# ---------------------------------------------------------------- slabs and flakes


@dataclass
class SlabDecouplingResult:
    """``int |Eg|^2 w`` against ``sum_tau int |Eg_tau|^2 w*``."""

    ratio: float
    lhs: float
    rhs: float
    nu: float
    n_caps: int
    cap_radius: float


def _voronoi_pieces(g, radius):
    """Split ``g`` by the nearest cap centre on the lattice ``radius Z^{n-1}`` (exact partition)."""
    w = g.omega()
    keys = np.round(w / radius).astype(int).reshape(-1, g.patch.d)
    live = (np.abs(g.samples) > 0).ravel()
    pieces = []
    for key in np.unique(keys[live], axis=0):
        sel = np.all(keys == key, axis=1).reshape(g.samples.shape)
        pieces.append((tuple(key * radius), g.with_samples(np.where(sel, g.samples, 0))))
    return pieces


def slab_decoupling_check(g, slabs, R, rho, cap_scale="quarter", grid=None, factor=3.0, field=None):
    """Decoupling ratio for a weight built from disjoint ``rho^{1/2}``-slabs.

    ``cap_scale`` is ``"half"`` for caps of radius ``rho^{-1/2}`` or
    ``"quarter"`` for ``rho^{-1/4}``. Pieces ``g_tau`` come from the sharp
    Voronoi partition of the cap-centre lattice, so ``sum g_tau = g``.
    Overlapping slabs raise :class:`GeometryError`.
    """
    exps = {"half": -0.5, "quarter": -0.25}
    if cap_scale not in exps:
        raise ValueError("cap_scale must be 'half' or 'quarter'")
    radius = rho ** exps[cap_scale]
    n = g.patch.dim
    if field is None:
        field = extend_fast_grid(g, R, 1.0)
    grid = field.grid if grid is None else grid
    w = make_slab_weight(slabs, grid)
    ws = star_weight(slabs, grid, factor)
    items = [s if not isinstance(s, tuple) else s[0] for s in slabs]
    nu = min((slab_parallelism(s, g.patch) for s in items), default=float("nan"))
    lhs = weighted_l2(field, w, R)
    pieces = _voronoi_pieces(g, radius)
    if len(pieces) == 1:
        rhs = weighted_l2(field, ws, R)
    else:
        rhs = sum(weighted_l2(extend_fast_grid(gt, R, 1.0), ws, R) for _, gt in pieces)
    ratio = lhs / rhs if rhs > 0 else 0.0
    return SlabDecouplingResult(float(ratio), float(lhs), float(rhs), nu, len(pieces), radius)


def flake_mt_check(g, flakes, R, pset=None, delta=0.05, field=None, grid=None, min_angle=0.02):
    """Weighted ``L^2`` of ``Eg`` over a flake weight against packet-resolved line maxima.

    ``rhs_packet = sum_T sup_{l in T} Xw(l) ||g_T||_2^2`` with ``l`` parallel
    to the axis of ``T`` at offsets inside its radius; ``rhs_xray`` is
    ``||Xw||_inf ||g||_2^2``. Flakes that are not nearly horizontal raise
    :class:`GeometryError`.
    """
    n = g.patch.dim
    if field is None:
        field = extend_fast_grid(g, R, 1.0)
    grid = field.grid if grid is None else grid
    w = make_flake_weight(flakes, grid, min_angle=min_angle)
    gn2 = g.norm2()
    lhs = weighted_l2(field, w, R)
    if gn2 == 0:
        return MTReport.build(0.0, {"packet": 0.0, "xray": 0.0}, R, 1.0, n, 0.0)
    pset = decompose(g, R, delta) if pset is None else pset
    rhs_packet = 0.0
    h = grid.spacing
    by_cap = {}
    for idx in pset.indices():
        by_cap.setdefault(idx.cap, []).append(idx)
    for cap, idxs in by_cap.items():
        T0 = pset.tube(idxs[0])
        u = T0.u
        Eb = perp_basis(u)
        cs = np.array([pset.tube(i).a @ Eb.T for i in idxs])
        r = T0.radius
        lo = cs.min(axis=0) - r
        hi = cs.max(axis=0) + r
        axes = [np.arange(l, hh + h / 4, h / 2) for l, hh in zip(lo, hi)]
        offs = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n - 1)
        prof = xray_profile(w, u, offs, center=np.zeros(n))
        for i, c in zip(idxs, cs):
            near = np.sum((offs - c) ** 2, axis=1) <= r * r
            rhs_packet += float(prof[near].max()) * pset[i].norm2
    rhs_x = max(xray_sup(w).value, 0.0) * gn2
    return MTReport.build(lhs, {"packet": rhs_packet, "xray": rhs_x}, R, 1.0, n, gn2,
                          meta={"n_packets": len(pset)})


# ---------------------------------------------------------------- sweeps


@dataclass
class ExponentFit:
    """Least-squares line ``log ratio = slope * log R + intercept``."""

    slope: float
    intercept: float
    residuals: np.ndarray

    def to_json(self):
        return {"slope": self.slope, "intercept": self.intercept, "residuals": list(map(float, self.residuals))}


def fit_exponent(R_values, ratios):
    """Fit ``ratio ~ C R^alpha``; needs at least three positive points."""
    R_values = np.asarray(R_values, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    if len(R_values) < 3 or len(R_values) != len(ratios):
        raise FitError("exponent fit needs at least three (R, ratio) pairs")
    if np.any(R_values <= 0) or np.any(ratios <= 0):
        raise FitError("exponent fit needs positive R and ratios")
    x, y = np.log(R_values), np.log(ratios)
    slope, intercept = np.polyfit(x, y, 1)
    return ExponentFit(float(slope), float(intercept), y - (slope * x + intercept))


def sweep(R_list, generator, sink=None, scenario=""):
    """Run ``generator(R)`` (returning an :class:`MTReport`) for each ``R`` and fit every ratio.

    Variants with a non-positive ratio at some ``R`` are left out of the fit.
    ``sink`` (a list) receives the reports.
    """
    R_list = list(R_list)
    if len(R_list) < 3:
        raise FitError("a sweep needs at least three values of R")
    reports = [generator(R) for R in R_list]
    if sink is not None:
        sink.extend(reports)
    fits = {}
    for k in sorted(reports[0].ratios):
        vals = [r.ratios.get(k, 0.0) for r in reports]
        if all(v > 0 for v in vals):
            fits[k] = fit_exponent(R_list, vals)
    return reports, fits


def write_reports(reports, csv_path, json_path=None, scenario=""):
    """CSV with one row per report (fixed column order) and an optional JSON log."""
    rows = [r.row(scenario) for r in reports]
    cols = []
    for row in rows:
        cols += [c for c in row if c not in cols]
    with open(csv_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([r.to_json() for r in reports], fh, indent=1, sort_keys=True)
