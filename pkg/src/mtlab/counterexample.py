"""A function satisfying the decoupling axioms that concentrates on a low-occupancy weight.

Caps of diameter ``d = R^{-1/(n+1)}`` tile the parameter domain. For each
cap ``tau`` the ambient space is tiled by boxes ("tubes") of cross-section
side ``2 R^{1/(n+1)}`` and length ``R^{2/(n+1)}`` along the normal
``N(tau)``. A weight ``w`` made of disjoint unit balls with few balls per
line is built by rejection sampling; a greedy pass selects balls whose tubes
are mostly fresh; phases ``c_T`` are then chosen ball by ball so that

``F = sum_tau sum_T c_T exp(-2 pi i <x, xi_tau>) d^{(n-1)/2} phi_T``

is large on every selected ball. The measured ratio
``int |F|^2 w / (||Xw||_inf R^{-1} int_{B_R} |F|^2)`` grows with ``R``.

A ball *lies in* a tube when its centre is in the tube's box; it is
*contained* in it when the centre is at least the ball radius from every
face; it *meets* it when the box and the ball intersect.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import j1

from .bumps import plateau
from .errors import GeometryError, InvariantError, ScaleError, StateError
from .geometry import Cap, Tube, normal, paraboloid, surface_point
from .grids import Field, box_grid
from .tomography import make_ball_union_weight, perp_basis, xray_sup_balls

__all__ = [
    "CexFamilies",
    "WeightCertificate",
    "Selection",
    "CexState",
    "CexEvaluation",
    "cex_patch",
    "build_families",
    "build_low_occupancy_weight",
    "select_balls",
    "assign_phases",
    "evaluate_cex",
    "ball_energy_exact",
    "verify_decoupling_axioms",
    "incidence_counts",
    "run_cex",
]


def cex_patch(dim=2):
    """Paraboloid ``|omega|^2 / 2`` over the unit ball."""
    return paraboloid(dim, domain_radius=1.0, a=0.5, name="cex-paraboloid")


# ---------------------------------------------------------------- families


@dataclass
class CexFamilies:
    """Caps and, per cap, the tiling of ``B_R`` by boxes along the cap normal.

    Tile ``(i_0, i_1, ...)`` of cap ``t`` is centred at
    ``i_0 * length * u_t + sum_k i_k * 2 * radius * e_{t,k}``, where ``u_t``
    is the unit normal and ``e_t`` an orthonormal basis of its complement.
    """

    R: float
    n: int
    patch: object
    cap_centers: np.ndarray
    diameter: float
    radius: float
    length: float
    kappa: float = 0.5
    directions: np.ndarray = None
    bases: np.ndarray = None
    xi: np.ndarray = None
    tiles: list = None

    def __post_init__(self):
        c = self.cap_centers
        self.directions = normal(self.patch, c)
        self.bases = np.stack([perp_basis(u) for u in self.directions])
        self.xi = surface_point(self.patch, c)
        if self.tiles is None:
            self.tiles = [self._tiles_meeting_ball(t) for t in range(len(c))]

    @property
    def n_caps(self):
        return len(self.cap_centers)

    @property
    def caps(self):
        return [Cap(tuple(c), self.diameter / 2) for c in self.cap_centers]

    @property
    def sizes(self):
        """Box side per frame axis: length along the normal, ``2 radius`` across."""
        return np.array([self.length] + [2 * self.radius] * (self.n - 1))

    def frame(self, t, x):
        """Coordinates of points ``x`` in the frame ``(u_t, e_t)``."""
        x = np.asarray(x, dtype=float)
        return np.concatenate([(x @ self.directions[t])[..., None], x @ self.bases[t].T], axis=-1)

    def tile_index(self, t, x):
        """Index of the tile of cap ``t`` containing each point, and the tile-local coordinates."""
        y = self.frame(t, x)
        idx = np.floor(y / self.sizes + 0.5).astype(np.int64)
        return idx, y - idx * self.sizes

    def tile_center(self, t, idx):
        idx = np.asarray(idx, dtype=float)
        y = idx * self.sizes
        return y[..., :1] * self.directions[t] + y[..., 1:] @ self.bases[t]

    def _tiles_meeting_ball(self, t):
        half = self.sizes / 2
        kmax = np.ceil(self.R / self.sizes + 1).astype(int)
        axes = [np.arange(-k, k + 1) for k in kmax]
        idx = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.n)
        c = idx * self.sizes
        gap = np.clip(np.abs(c) - half, 0, None)
        keep = np.sum(gap * gap, axis=1) <= self.R**2
        return idx[keep]

    def tube(self, t, idx):
        """The tile as a :class:`Tube` (round cross-section of radius ``radius``)."""
        return Tube(tuple(self.tile_center(t, idx)), tuple(self.directions[t]), self.radius, self.length)

    def tube_ids(self):
        return [(t,) + tuple(int(i) for i in idx) for t in range(self.n_caps) for idx in self.tiles[t]]

    def tile_counts(self, t, x):
        """Number of closed tiles of cap ``t`` containing each point (from the tile list)."""
        y = self.frame(t, x)
        tiles = self.tiles[t]
        ok = set(map(tuple, tiles.tolist()))
        counts = np.zeros(len(y), dtype=int)
        base = np.floor(y / self.sizes + 0.5).astype(np.int64)
        for shift in itertools.product((-1, 0, 1), repeat=self.n):
            idx = base + np.asarray(shift)
            d = np.abs(y - idx * self.sizes) - self.sizes / 2
            inside = np.all(d <= 1e-9, axis=1)
            member = np.array([tuple(i) in ok for i in idx.tolist()])
            counts += inside & member
        return counts


def build_families(R, n=2, patch=None, kappa=0.5):
    """Caps of diameter ``R^{-1/(n+1)}`` and their tube tilings of ``B_R``.

    ``n = 2``: the domain ``[-r, r]`` is cut into ``round(2r/d)`` equal
    intervals. ``n = 3``: squares of side ``2r / round(2r/d)`` whose centres
    lie in the domain disc.
    """
    if R < 16:
        raise ScaleError("the construction needs R >= 16")
    patch = cex_patch(n) if patch is None else patch
    if patch.dim != n:
        raise ValueError("patch dimension differs from n")
    r = patch.domain_radius
    d = R ** (-1.0 / (n + 1))
    k = max(int(round(2 * r / d)), 1)
    side = 2 * r / k
    ax = -r + side * (np.arange(k) + 0.5)
    if n == 2:
        centers = ax[:, None]
    else:
        centers = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
        centers = centers[np.linalg.norm(centers, axis=1) < r]
    return CexFamilies(float(R), n, patch, centers, side, R ** (1.0 / (n + 1)), R ** (2.0 / (n + 1)), kappa)


# ---------------------------------------------------------------- weight


@dataclass
class WeightCertificate:
    """Checkable properties of the ball-union weight."""

    n_balls: int
    target: int
    L_max: float
    T_max: float
    bound: float
    attempts: int
    line_cap: int = None
    passed: bool = False

    def to_json(self):
        return dict(self.__dict__)


def _containment_margin(families, x, margin):
    """Whether every tile-local coordinate is at least ``margin`` from the faces, for every cap."""
    ok = np.ones(len(x), dtype=bool)
    for t in range(families.n_caps):
        _, loc = families.tile_index(t, x)
        ok &= np.all(np.abs(loc) <= families.sizes / 2 - margin, axis=1)
    return ok


class _LineTable:
    """Counts of balls per (angle, offset) bin; angles step ``1/R``, offsets step 1 (n = 2)."""

    def __init__(self, R, radius):
        k = int(math.ceil(math.pi * R))
        phi = math.pi * np.arange(k) / k
        self.e = np.stack([-np.sin(phi), np.cos(phi)], axis=1)
        self.radius = radius
        self.off = int(math.ceil(R + 2 * radius)) + 1
        self.counts = np.zeros((k, 2 * self.off + 1), dtype=np.int16)
        self.rows = np.arange(k)

    def _bins(self, c):
        p = self.e @ c
        lo = np.floor(p - self.radius).astype(int) + self.off
        return lo

    def fits(self, c, cap):
        lo = self._bins(c)
        span = int(math.ceil(2 * self.radius)) + 1
        for s in range(span):
            if np.any(self.counts[self.rows, lo + s] >= cap):
                return False
        return True

    def add(self, c):
        lo = self._bins(c)
        for s in range(int(math.ceil(2 * self.radius)) + 1):
            self.counts[self.rows, lo + s] += 1


def _ball_volume(n, r=1.0):
    return math.pi * r * r if n == 2 else 4.0 / 3.0 * math.pi * r**3


def _tube_occupancy(families, centers, ball_r):
    """Largest ``w(T)`` over tiles, counting whole balls whose centre lies in the tile."""
    best = 0
    for t in range(families.n_caps):
        idx, _ = families.tile_index(t, centers)
        if len(idx):
            _, cnt = np.unique(idx, axis=0, return_counts=True)
            best = max(best, int(cnt.max()))
    return best * _ball_volume(families.n, ball_r)


def build_low_occupancy_weight(families, rng, target=None, ball_radius=1.0, margin=None,
                               line_cap=6, C_occ=8.0, max_attempts=None, retries=3, grid=False):
    """Disjoint unit balls in ``B_R`` with bounded line and tube occupancy.

    Candidates are uniform integer points of ``B_{R - 1}``; a candidate is
    kept when it is at distance ``>= margin`` from every tile face of every
    cap (so each tube containing the centre contains the ball and no other
    tube bump reaches it), at distance ``>= 2.5`` from earlier centres, and
    (``n = 2``, ``line_cap`` set) no line bin already holds ``line_cap``
    balls. Up to ``retries`` fresh draws are made if the certificate fails;
    the draw with the smallest ``L_max`` is returned.

    Returns
    -------
    centers : ndarray
    certificate : WeightCertificate
    weight : Weight or None
        Rasterised on the unit grid of ``B_R`` when ``grid`` is true.
    """
    R, n = families.R, families.n
    target = int(round(R ** (n - 1))) if target is None else int(target)
    if margin is None:
        margin = ball_radius + families.kappa / 2 if n == 2 else 0.0
    max_attempts = 400 * max(target, 1) if max_attempts is None else max_attempts
    bound = C_occ * math.log2(R)
    tube_cap = int(math.floor(bound / _ball_volume(n, ball_radius)))
    best = None
    for _ in range(max(1, retries)):
        centers, attempts = _sample_balls(families, rng, target, ball_radius, margin,
                                          line_cap if n == 2 else None, tube_cap, max_attempts)
        L = xray_sup_balls(centers, ball_radius).value if len(centers) else 0.0
        T = _tube_occupancy(families, centers, ball_radius) if len(centers) else 0.0
        cert = WeightCertificate(len(centers), target, float(L), float(T), bound, attempts,
                                 line_cap if n == 2 else None, bool(L <= bound and T <= bound))
        if best is None or (cert.passed, -cert.L_max) > (best[1].passed, -best[1].L_max):
            best = (centers, cert)
        if cert.passed:
            break
    centers, cert = best
    w = make_ball_union_weight(centers, ball_radius, R=R) if grid and len(centers) else None
    return centers, cert, w


def _sample_balls(families, rng, target, ball_r, margin, line_cap, tube_cap, max_attempts):
    R, n = families.R, families.n
    inner = R - ball_r
    centers = []
    table = _LineTable(R, ball_r) if line_cap is not None else None
    tile_fill = [dict() for _ in range(families.n_caps)]
    batch = 4096
    attempts = 0
    while len(centers) < target and attempts < max_attempts:
        cand = np.rint(rng.uniform(-inner, inner, size=(batch, n)))
        cand = cand[np.sum(cand * cand, axis=1) <= inner * inner]
        if margin > 0:
            cand = cand[_containment_margin(families, cand, margin)]
        for c in cand:
            attempts += 1
            if attempts > max_attempts or len(centers) >= target:
                break
            if centers:
                C = np.asarray(centers)
                if np.min(np.sum((C - c) ** 2, axis=1)) < (2.5 * ball_r) ** 2:
                    continue
            keys = [tuple(families.tile_index(t, c[None])[0][0]) for t in range(families.n_caps)]
            if any(tile_fill[t].get(k, 0) >= tube_cap for t, k in enumerate(keys)):
                continue
            if table is not None and not table.fits(c, line_cap):
                continue
            centers.append(c)
            for t, k in enumerate(keys):
                tile_fill[t][k] = tile_fill[t].get(k, 0) + 1
            if table is not None:
                table.add(c)
        attempts += batch - len(cand)
    return np.asarray(centers, dtype=float).reshape(-1, n), attempts


# ---------------------------------------------------------------- incidences and selection


def _tubes_through(families, x):
    """Tube ids (one per cap) of the tiles containing the point ``x``."""
    return [(t,) + tuple(int(i) for i in families.tile_index(t, x[None])[0][0]) for t in range(families.n_caps)]


def _meets(families, tid, centers, ball_r):
    """Whether the balls meet the box of tube ``tid``; tangency (up to rounding) does not count."""
    t, idx = tid[0], np.asarray(tid[1:])
    y = families.frame(t, centers) - idx * families.sizes
    gap = np.clip(np.abs(y) - families.sizes / 2, 0, None)
    return np.sum(gap * gap, axis=-1) < ball_r * ball_r * (1 - 1e-9)


def _contained(families, tid, centers, ball_r):
    t, idx = tid[0], np.asarray(tid[1:])
    y = families.frame(t, centers) - idx * families.sizes
    return np.all(np.abs(y) <= families.sizes / 2 - ball_r + 1e-9, axis=-1)


def incidence_counts(families, centers, tube_ids, ball_r=1.0):
    """``I(P, T)`` (ball contained in tube) counted per ball and per tube."""
    centers = np.atleast_2d(centers)
    tube_set = set(tube_ids)
    ballwise = 0
    for c in centers:
        for tid in _tubes_through(families, c):
            if tid in tube_set and _contained(families, tid, c[None], ball_r)[0]:
                ballwise += 1
    tubewise = int(sum(_contained(families, tid, centers, ball_r).sum() for tid in tube_ids))
    return ballwise, tubewise


@dataclass
class Selection:
    """Selected ball indices (in weight order) and the fresh tube sets ``T_j``."""

    order: list
    richsets: dict
    incidences: int
    incidences_tubewise: int
    tubes_used: list = dc_field(default_factory=list)

    @property
    def m(self):
        return len(self.order)


def select_balls(centers, families, ball_r=1.0):
    """Greedy pass over balls in index order.

    A ball is selected when at most ``#D/2`` of the tubes through it meet an
    earlier selected ball; its set ``T_j`` is the tubes through it meeting no
    earlier selected ball. Returns the selection with the incidence count
    between all balls and the tubes through selected balls.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if centers.size == 0:
        return Selection([], {}, 0, 0)
    half = families.n_caps / 2
    order, rich = [], {}
    used = set()
    for i, c in enumerate(centers):
        through = _tubes_through(families, c)
        if order:
            prev = centers[order]
            stale = [tid for tid in through if np.any(_meets(families, tid, prev, ball_r))]
        else:
            stale = []
        if len(stale) <= half:
            rich[len(order)] = [tid for tid in through if tid not in stale]
            order.append(i)
            used.update(through)
    used = sorted(used)
    bw, tw = incidence_counts(families, centers, used, ball_r)
    return Selection(order, rich, bw, tw, used)


# ---------------------------------------------------------------- phases


@dataclass
class CexState:
    """Weight balls, selection, tube phases and ball signs."""

    R: float
    n: int
    centers: np.ndarray
    ball_radius: float = 1.0
    selection: Selection = None
    phases: dict = dc_field(default_factory=dict)
    signs: dict = dc_field(default_factory=dict)
    certificate: WeightCertificate = None
    default_phase: complex = 1.0
    kappa: float = 0.5

    @property
    def balls(self):
        if self.selection is None:
            return np.zeros((0, self.n))
        return self.centers[self.selection.order]

    @property
    def richsets(self):
        return {} if self.selection is None else self.selection.richsets

    def weight(self):
        return make_ball_union_weight(self.centers, self.ball_radius, R=self.R)

    def check_invariants(self, families):
        """``|c_T| = 1``; (P1) tubes of ``T_j`` contain ``B_j``; (P2) they avoid earlier balls."""
        for tid, c in self.phases.items():
            if abs(abs(c) - 1) > 1e-12:
                raise InvariantError("unimodular phases", f"|c_T| = {abs(c)} for {tid}")
        balls = self.balls
        for j, tids in self.richsets.items():
            for tid in tids:
                if not _contained(families, tid, balls[j][None], self.ball_radius)[0] and not \
                        _meets(families, tid, balls[j][None], self.ball_radius)[0]:
                    raise InvariantError("P1", f"tube {tid} misses ball {j}")
                if j and np.any(_meets(families, tid, balls[:j], self.ball_radius)):
                    raise InvariantError("P2", f"tube {tid} of ball {j} meets an earlier ball")

    def to_json(self):
        def tid(t):
            return [int(x) for x in t]

        return {
            "R": self.R, "n": self.n, "ball_radius": self.ball_radius, "kappa": self.kappa,
            "centers": self.centers.tolist(),
            "selected": [] if self.selection is None else list(map(int, self.selection.order)),
            "richsets": {str(j): [tid(t) for t in ts] for j, ts in self.richsets.items()},
            "phases": [[*tid(t), float(np.angle(c))] for t, c in sorted(self.phases.items())],
            "signs": {str(j): int(s) for j, s in self.signs.items()},
            "certificate": None if self.certificate is None else self.certificate.to_json(),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, doc, families=None):
        centers = np.asarray(doc["centers"], dtype=float).reshape(-1, doc["n"])
        st = cls(float(doc["R"]), int(doc["n"]), centers, float(doc["ball_radius"]), kappa=float(doc["kappa"]))
        if doc.get("selected") or doc.get("richsets"):
            rich = {int(j): [tuple(t) for t in ts] for j, ts in doc["richsets"].items()}
            st.selection = Selection(list(doc["selected"]), rich, 0, 0)
        st.phases = {tuple(int(x) for x in row[:-1]): complex(np.exp(1j * row[-1])) for row in doc["phases"]}
        st.signs = {int(j): int(s) for j, s in doc["signs"].items()}
        if doc.get("certificate"):
            st.certificate = WeightCertificate(**doc["certificate"])
        return st

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def assign_phases(state, families):
    """Choose ``c_T`` ball by ball (sign taken at the ball centre); other tubes get 1.

    Returns a new state; the input is not modified.
    """
    if state.selection is None:
        raise StateError("select balls before assigning phases")
    phases, signs = {}, {}
    xi = families.xi
    for j, x in enumerate(state.balls):
        through = _tubes_through(families, x)
        old = [t for t in through if t in phases]
        if j == 0:
            sigma = 1
        else:
            s = sum((phases[t] * np.exp(-2j * np.pi * (x @ xi[t[0]]))).real for t in old)
            sigma = -1 if s < 0 else 1
        signs[j] = sigma
        for t in through:
            if t not in phases:
                phases[t] = sigma * np.exp(2j * np.pi * (x @ xi[t[0]]))
    for t in families.tube_ids():
        phases.setdefault(t, complex(state.default_phase))
    out = CexState(state.R, state.n, state.centers, state.ball_radius, state.selection,
                   phases, signs, state.certificate, state.default_phase, state.kappa)
    return out


# ---------------------------------------------------------------- evaluation


def _phase_grids(families, phases):
    """Per cap: dense array of ``c_T`` over tile indices (0 outside the family) and its index offset."""
    out = []
    for t in range(families.n_caps):
        tiles = families.tiles[t]
        lo = tiles.min(axis=0) - 2
        hi = tiles.max(axis=0) + 2
        arr = np.zeros(tuple(hi - lo + 1), dtype=complex)
        for idx in tiles:
            arr[tuple(idx - lo)] = phases.get((t,) + tuple(int(i) for i in idx), 0.0)
        out.append((arr, lo))
    return out


def _family_field(families, t, x, grid_t):
    """``sum_T c_T phi_T(x)`` for cap ``t`` (without modulation or normalisation)."""
    arr, lo = grid_t
    k = families.kappa
    sizes = families.sizes
    idx, loc = families.tile_index(t, x)
    own, nb_shift, nb_val = [], [], []
    for a in range(families.n):
        L = sizes[a] / 2
        la = loc[:, a]
        own.append(plateau(np.abs(la), L - k / 2, L + k / 2))
        sh = np.where(la > L - k / 2, 1, np.where(la < -(L - k / 2), -1, 0))
        nb_shift.append(sh)
        nb_val.append(np.where(sh != 0, plateau(np.abs(la - sh * sizes[a]), L - k / 2, L + k / 2), 0.0))
    out = np.zeros(len(x), dtype=complex)
    shape = np.asarray(arr.shape)
    for combo in itertools.product((0, 1), repeat=families.n):
        val = np.ones(len(x))
        shift = np.zeros_like(idx)
        for a, use_nb in enumerate(combo):
            if use_nb:
                val = val * nb_val[a]
                shift[:, a] = nb_shift[a]
            else:
                val = val * own[a]
        live = val != 0
        if not np.any(live):
            continue
        j = idx[live] + shift[live] - lo
        ok = np.all((j >= 0) & (j < shape), axis=1)
        c = np.zeros(int(live.sum()), dtype=complex)
        c[ok] = arr[tuple(j[ok].T)]
        out[live] += c * val[live]
    return out


def _evaluate_points(families, x, grids, caps=None):
    """``F`` (or the listed ``F_tau``) at points ``x``; returns the sum and optionally per cap."""
    x = np.atleast_2d(x)
    amp = families.diameter ** ((families.n - 1) / 2)
    total = np.zeros(len(x), dtype=complex)
    per = {}
    for t in range(families.n_caps) if caps is None else caps:
        ft = amp * np.exp(-2j * np.pi * (x @ families.xi[t])) * _family_field(families, t, x, grids[t])
        total += ft
        per[t] = ft
    return total, per


def _ball_quadrature(n, r=1.0, n_r=12, n_phi=32, step=0.125):
    """Nodes and weights on the ball: polar Gauss rule in the plane, midpoint rule in space."""
    if n == 2:
        x, wx = np.polynomial.legendre.leggauss(n_r)
        rad = r * (x + 1) / 2
        phi = 2 * np.pi * np.arange(n_phi) / n_phi
        pts = np.stack([np.outer(rad, np.cos(phi)), np.outer(rad, np.sin(phi))], -1).reshape(-1, 2)
        wts = np.outer(wx * rad * r / 2, np.full(n_phi, 2 * np.pi / n_phi)).ravel()
        return pts, wts
    k = int(math.ceil(r / step))
    ax = step * (np.arange(-k, k) + 0.5)
    pts = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1).reshape(-1, n)
    pts = pts[np.sum(pts * pts, axis=1) <= r * r]
    return pts, np.full(len(pts), _ball_volume(n, r) / len(pts))


@dataclass
class CexEvaluation:
    """Measured quantities of the construction."""

    int_w: float
    int_total: float
    xray: float
    ratio: float
    frac_large: float
    threshold: float
    field: Field = None
    fields: dict = None
    meta: dict = dc_field(default_factory=dict)

    def row(self):
        return {"int_w": self.int_w, "int_total": self.int_total, "xray": self.xray,
                "ratio": self.ratio, "frac_large": self.frac_large, **self.meta}


def evaluate_cex(state, families, keep_fields=False, check=True, c_F=0.1, C_bud=10.0, chunk=1 << 18):
    """Evaluate ``F`` on the unit grid of ``B_R`` and on the balls of ``w``.

    ``int |F|^2 w`` uses a polar Gauss rule on each ball (midpoint rule in space);
    ``int_{B_R} |F|^2`` sums the unit grid; ``||Xw||_inf`` comes from exact
    chord sums (reused from the weight certificate when it matches). With ``check``, raises :class:`InvariantError` when ``|F|``
    falls below ``c_F R^{(n-1)/(2(n+1))}`` on more than half of the
    selected balls' unit-grid points, or (``n = 2``) when ``int |F|^2 > C_bud R^n``.
    In space ``int |F|^2`` is about ``#D d^2 |B_R|``, which exceeds ``10 R^3``,
    so the budget is not asserted there.
    """
    if not state.phases:
        raise StateError("phases have not been assigned")
    R, n = families.R, families.n
    grids = _phase_grids(families, state.phases)
    grid = box_grid(R, n, 1.0)
    pts = grid.points()
    F = np.empty(len(pts), dtype=complex)
    per = {t: np.empty(len(pts), dtype=complex) for t in range(families.n_caps)} if keep_fields else None
    for s in range(0, len(pts), chunk):
        tot, p = _evaluate_points(families, pts[s : s + chunk], grids)
        F[s : s + chunk] = tot
        if keep_fields:
            for t, v in p.items():
                per[t][s : s + chunk] = v
    inball = np.sum(pts * pts, axis=1) <= R * R
    int_total = float(np.sum(np.abs(F[inball]) ** 2))
    q, qw = _ball_quadrature(n, r=state.ball_radius)
    int_w = 0.0
    C = state.centers
    for s in range(0, len(C), max(1, chunk // len(q))):
        xs = (C[s : s + chunk // len(q), None, :] + q[None]).reshape(-1, n)
        v, _ = _evaluate_points(families, xs, grids)
        int_w += float(np.sum(np.abs(v) ** 2 * np.tile(qw, len(xs) // len(q))))
    cert = state.certificate
    if cert is not None and cert.n_balls == len(C):
        xray = cert.L_max
    else:
        xray = xray_sup_balls(C, state.ball_radius).value if len(C) else 0.0
    ratio = int_w / (xray * int_total / R) if xray > 0 and int_total > 0 else 0.0
    thr = c_F * R ** ((n - 1) / (2 * (n + 1)))
    balls = state.balls
    if len(balls):
        k = int(math.ceil(state.ball_radius))
        offs = np.stack(np.meshgrid(*([np.arange(-k, k + 1)] * n), indexing="ij"), -1).reshape(-1, n)
        offs = offs[np.sum(offs * offs, axis=1) <= state.ball_radius**2 + 1e-9]
        bp = (np.rint(balls)[:, None, :] + offs[None]).reshape(-1, n)
        bp = bp[np.sum((bp.reshape(len(balls), -1, n) - balls[:, None, :]) ** 2, axis=2).ravel()
                <= state.ball_radius**2 + 1e-9]
        vals, _ = _evaluate_points(families, bp, grids)
        frac = float(np.mean(np.abs(vals) >= thr))
    else:
        frac = 1.0
    fld = Field(grid, F.reshape(grid.shape))
    fields = {t: Field(grid, v.reshape(grid.shape)) for t, v in per.items()} if keep_fields else None
    ev = CexEvaluation(int_w, int_total, float(xray), float(ratio), frac, thr, fld, fields,
                       {"R": R, "n": n, "n_balls": len(C), "m": len(balls), "n_caps": families.n_caps})
    if check:
        if len(balls) and frac < 0.5:
            raise InvariantError("F large on selected balls", f"only {frac:.2%} of ball points reach {thr:.3g}")
        if n == 2 and int_total > C_bud * R**n:
            raise InvariantError("L2 budget", f"int |F|^2 = {int_total:.4g} > {C_bud} R^n")
    return ev


def ball_energy_exact(state, families, j):
    """``int_{B} |F|^2`` for ball ``j`` of the weight, from the plane-wave expansion on the ball.

    Valid when every tube bump through the ball equals 1 on it and no other
    bump reaches it (the default sampling margin). Uses
    ``int_{|y|<=r} exp(-2 pi i <y, D>) dy`` in closed form.
    """
    x = state.centers[j]
    r = state.ball_radius
    amp = families.diameter ** ((families.n - 1) / 2)
    through = _tubes_through(families, x)
    a = np.array([state.phases[t] for t in through]) * np.exp(-2j * np.pi * (families.xi @ x))
    D = families.xi[:, None, :] - families.xi[None, :, :]
    k = np.linalg.norm(D, axis=-1)
    z = 2 * np.pi * k * r
    if families.n == 2:
        J = np.where(k > 0, r * j1(z) / np.where(k > 0, k, 1), np.pi * r * r)
    else:
        J = np.where(k > 0, 4 * np.pi * (np.sin(z) - z * np.cos(z)) / np.where(k > 0, (2 * np.pi * k) ** 3, 1),
                     4 / 3 * np.pi * r**3)
    return float(np.real(amp**2 * np.sum(np.outer(a, np.conj(a)) * J)))


# ---------------------------------------------------------------- decoupling axioms


def _dual_box(families, t):
    """Half-widths of the box ``|<x, e>| <= 1/max|<xi - xi_t, e>|`` along the frame of cap ``t``."""
    c = families.cap_centers[t]
    half = families.diameter / 2
    d = families.n - 1
    ax = np.linspace(-1, 1, 9)
    pts = np.array(list(itertools.product(ax, repeat=d))) * half + c
    r = families.patch.domain_radius
    pts = pts[np.linalg.norm(pts, axis=1) <= r] if d > 1 else np.clip(pts, -r, r)
    xi = surface_point(families.patch, pts) - families.xi[t]
    axes = np.concatenate([families.directions[t][None], families.bases[t]])
    spread = np.max(np.abs(xi @ axes.T), axis=0)
    return axes, 1.0 / np.maximum(spread, 1e-12)


def verify_decoupling_axioms(fields, families, rng=None, n_translates=20, C_da1=20.0, da2_bounds=(0.25, 4.0),
                             R=None, translates=None):
    """Local constancy on dual boxes and local orthogonality over ``B_R``.

    ``fields`` maps cap index to the :class:`Field` of ``F_tau``. DA1: for
    random translates (centres in ``B_{R/2}``, or the rows of ``translates``)
    of each dual box, ``max/mean`` of ``|F_tau|``. DA2: for every dyadic
    block ``gamma`` of consecutive caps,
    ``int_{B_R} |F_gamma|^2 / sum_{tau in gamma} int_{B_R} |F_tau|^2``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    R = families.R if R is None else R
    keys = sorted(fields)
    any_f = fields[keys[0]]
    pts = any_f.grid.points()
    inball = np.sum(pts * pts, axis=1) <= R * R
    da1 = {}
    for t in keys:
        a = np.abs(fields[t].samples).ravel()
        axes, hw = _dual_box(families, t) if t < families.n_caps else (np.eye(families.n), np.ones(families.n))
        worst = 0.0
        for k in range(n_translates if translates is None else len(translates)):
            if translates is None:
                c = rng.normal(size=families.n)
                c *= (R / 2) * rng.random() ** (1 / families.n) / np.linalg.norm(c)
            else:
                c = np.asarray(translates[k], dtype=float)
            y = (pts - c) @ axes.T
            sel = np.all(np.abs(y) <= hw, axis=1) & inball
            if not np.any(sel):
                continue
            m = a[sel].mean()
            if m > 0:
                worst = max(worst, float(a[sel].max() / m))
        da1[t] = worst
    energies = {t: float(np.sum(np.abs(fields[t].samples.ravel()[inball]) ** 2)) for t in keys}
    da2 = {}
    size = 2
    while size <= len(keys):
        for start in range(0, len(keys), size):
            block = keys[start : start + size]
            if len(block) < 2:
                continue
            Fg = sum(fields[t].samples.ravel()[inball] for t in block)
            den = sum(energies[t] for t in block)
            if den > 0:
                da2[(size, start)] = float(np.sum(np.abs(Fg) ** 2) / den)
        if size >= len(keys):
            break
        size = min(2 * size, len(keys))
    ok1 = all(v <= C_da1 for v in da1.values())
    ok2 = all(da2_bounds[0] <= v <= da2_bounds[1] for v in da2.values())
    return {"da1": da1, "da2": da2, "da1_max": max(da1.values(), default=0.0),
            "da2_range": (min(da2.values(), default=1.0), max(da2.values(), default=1.0)),
            "da1_pass": ok1, "da2_pass": ok2}


# ---------------------------------------------------------------- pipeline


def run_cex(R, n=2, seed=0, keep_fields=False, check=True, **weight_kw):
    """Families, weight, selection, phases and evaluation for one ``(R, seed)``."""
    rng = np.random.default_rng(seed)
    fam = build_families(R, n)
    centers, cert, _ = build_low_occupancy_weight(fam, rng, **weight_kw)
    sel = select_balls(centers, fam)
    state = CexState(float(R), n, centers, selection=sel, certificate=cert, kappa=fam.kappa)
    state = assign_phases(state, fam)
    state.check_invariants(fam)
    ev = evaluate_cex(state, fam, keep_fields=keep_fields, check=check)
    ev.meta.update({"seed": seed, "L_max": cert.L_max, "T_max": cert.T_max, "certified": cert.passed})
    return fam, state, ev
