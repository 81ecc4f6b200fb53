"""Wave-packet decomposition of densities at scale ``R``.

``g_{theta,v} = psi~_theta * (eta_v^ conv (psi_theta g))``. The convolution is
carried out in the spatial representation ``P(x) = sum_k a_k e^{2 pi i x omega_k}``
of ``psi_theta g`` (which is the ``t = 0`` slice of its extension): multiply
by ``eta_v`` and transform back. Everything is done on a local frequency
window around each cap, padded so the spread of the convolution is kept.

Since ``sum_v eta_v = 1`` and ``psi~_theta = 1`` on the support of
``psi_theta``, summing all packets returns ``g`` up to rounding.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bumps import bump, plateau
from .errors import ResolutionError, ScaleError
from .extension import Density, extend_fast_grid
from .geometry import Cap, Tube, cap_cover, normal

__all__ = [
    "PacketIndex",
    "Packet",
    "PacketSet",
    "WavePacketDecomposer",
    "decompose",
    "tube_of",
    "check_reconstruction",
    "check_orthogonality",
    "check_decay",
    "essential_support",
    "local_constancy_check",
]


@dataclass(frozen=True)
class PacketIndex:
    """Cap ``theta`` (radius ``R^{-1/2}``) and spatial lattice point ``v``."""

    cap: Cap
    v: tuple


@dataclass
class Packet:
    """One packet stored on its local frequency window.

    ``lo`` is the index (per axis, in the full density grid) of the first
    window sample, ``values`` the samples on the window.
    """

    index: PacketIndex
    theta: int
    lo: tuple
    values: np.ndarray
    norm2: float


class PacketSet:
    """Collection of packets of one density at scale ``R``."""

    def __init__(self, R, delta, template, packets, caps, v_lattice):
        self.R = float(R)
        self.delta = float(delta)
        self.template = template
        self.packets = packets
        self.caps = caps
        self.v_lattice = v_lattice

    @property
    def patch(self):
        return self.template.patch

    def __len__(self):
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)

    def __getitem__(self, idx):
        return self.packets[idx]

    def indices(self):
        return list(self.packets)

    def _accumulate(self, out, p, coef=1.0):
        d = out.ndim
        n = p.values.shape[0]
        lo = np.asarray(p.lo)
        src = [slice(None)] * d
        dst = [slice(None)] * d
        for ax in range(d):
            a = max(lo[ax], 0)
            b = min(lo[ax] + n, out.shape[ax])
            if b <= a:
                return
            dst[ax] = slice(a, b)
            src[ax] = slice(a - lo[ax], b - lo[ax])
        out[tuple(dst)] += coef * p.values[tuple(src)]

    def density(self, indices=None, coefs=None):
        """Sum of the selected packets (all by default) as a :class:`Density`."""
        t = self.template
        out = np.zeros_like(t.samples)
        items = self.packets.values() if indices is None else (self.packets[i] for i in indices)
        for j, p in enumerate(items):
            self._accumulate(out, p, 1.0 if coefs is None else coefs[j])
        return t.with_samples(out)

    def norms(self):
        return {i: np.sqrt(p.norm2) for i, p in self.packets.items()}

    def total_norm2(self):
        return float(sum(p.norm2 for p in self.packets.values()))

    def tube(self, idx, scale=1.0):
        return tube_of(idx, self.patch, self.R, self.delta).dilate(scale)

    def tubes(self, indices=None):
        indices = self.indices() if indices is None else indices
        return [self.tube(i) for i in indices]

    def to_csv(self, path):
        """Index table: cap centre, v, packet norm and tube parameters."""
        d = self.patch.d
        n = self.patch.dim
        header = (
            [f"theta{i}" for i in range(d)]
            + [f"v{i}" for i in range(d)]
            + ["norm"]
            + [f"anchor{i}" for i in range(n)]
            + [f"dir{i}" for i in range(n)]
            + ["radius", "length"]
        )
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for idx, p in self.packets.items():
                T = self.tube(idx)
                row = list(idx.cap.center) + list(idx.v) + [np.sqrt(p.norm2)]
                row += list(T.anchor) + list(T.direction) + [T.radius, T.length]
                wr.writerow([f"{x:.12g}" for x in row])


def tube_of(idx, patch, R, delta):
    """Tube ``T_{theta,v}``: anchor ``(v, 0)``, direction ``N(theta)``, radius ``R^{1/2+delta}``, length ``2R``."""
    c = np.asarray(idx.cap.center)
    r = patch.domain_radius
    if np.linalg.norm(c) > r:
        c = c * (r / np.linalg.norm(c))
    u = normal(patch, c)
    anchor = tuple(idx.v) + (0.0,)
    return Tube(anchor, tuple(u), R ** (0.5 + delta), 2 * R)


def _v_lattice_1d(L, period):
    """Lattice ``L Z`` inside one period, plus a seam point if the seam gap is too wide."""
    imax = int(np.floor(period / 2 / L))
    pts = list(L * np.arange(-imax, imax + 1))
    gap = period - 2 * imax * L
    if gap > 1.2 * L:
        pts.append(period / 2)
    return np.asarray(pts)


def _periodic(x, period):
    return (x + period / 2) % period - period / 2


class WavePacketDecomposer(TransformerMixin, BaseEstimator):
    """Wave-packet decomposition at scale ``R``.

    Parameters
    ----------
    R : float
        Scale; caps have radius ``R^{-1/2}`` and the spatial lattice has
        spacing ``R^{(1+delta)/2}``.
    delta : float
        Tube-widening exponent in ``[0, 0.2]``.
    psi_support : float
        Support radius of each frequency bump, in units of the cap radius.
    eta_support : float
        Support radius of each spatial bump, in units of the lattice spacing.
    plateau_margin : float
        ``psi~`` equals 1 up to ``(psi_support + plateau_margin)`` cap radii.
    taper_end : float
        ``psi~`` vanishes beyond ``taper_end`` cap radii; this is the packet
        support radius.
    pad : float
        Half-width of the local frequency window in cap radii.
    prune : float
        Packets with ``||g_T||_2 <= prune * ||g||_2`` are dropped.
    """

    def __init__(self, R=64, delta=0.05, psi_support=0.6, eta_support=0.7,
                 plateau_margin=0.25, taper_end=1.5, pad=4.0, prune=1e-9):
        self.R = R
        self.delta = delta
        self.psi_support = psi_support
        self.eta_support = eta_support
        self.plateau_margin = plateau_margin
        self.taper_end = taper_end
        self.pad = pad
        self.prune = prune

    def fit(self, X, y=None):
        """Prepare caps, bump kit and lattice for densities shaped like ``X``."""
        g = X
        if not 0 <= self.delta <= 0.2:
            raise ValueError("delta must lie in [0, 0.2]")
        if self.R > g.R_max * (1 + 1e-12):
            raise ResolutionError(f"density certified up to R={g.R_max}, need R={self.R}")
        patch = g.patch
        rho = self.R**-0.5
        if rho * g.N < 4:
            raise ResolutionError("fewer than 4 frequency samples per cap radius")
        self.patch_ = patch
        self.N_ = g.N
        self.R_max_ = g.R_max
        self.K_ = g.K
        self.cap_radius_ = rho
        self.lattice_spacing_ = self.R ** ((1 + self.delta) / 2)
        self.caps_ = cap_cover(patch, rho)
        centers = np.array([c.center for c in self.caps_])
        self.centers_ = centers
        half = int(np.ceil(self.pad * rho * g.N))
        self.window_ = 2 * half
        self.half_ = half
        # spatial sample points of the local window: period N, n_w samples
        self.x_local_ = _periodic(np.arange(self.window_) * (g.N / self.window_), g.N)
        self.v1d_ = _v_lattice_1d(self.lattice_spacing_, g.N)
        self.eta1d_ = self._eta_table()
        return self

    def _eta_table(self):
        """Normalised 1-d spatial bumps on the local window: shape (#v, n_w)."""
        L = self.lattice_spacing_
        dist = _periodic(self.x_local_[None, :] - self.v1d_[:, None], self.N_)
        raw = bump(dist / (self.eta_support * L))
        s = raw.sum(axis=0)
        if np.any(s <= 0):
            raise ScaleError("spatial lattice does not cover the period")
        return raw / s

    def _psi_raw(self, w):
        rho = self.cap_radius_
        d2 = np.sum((w[..., None, :] - self.centers_) ** 2, axis=-1)
        return bump(np.sqrt(d2) / (self.psi_support * rho))

    def psi_bump(self, theta):
        """The normalised frequency bump ``psi_theta`` as a density (cap index ``theta``)."""
        check_is_fitted(self, "caps_")
        g = Density.zeros(self.patch_, self.R_max_, N=self.N_)
        raw = self._psi_raw(g.omega())
        denom = raw.sum(axis=-1)
        psi = np.where(denom > 0, raw[..., theta] / np.where(denom > 0, denom, 1), 0.0)
        return g.with_samples((psi * g.mask).astype(complex))

    def _window(self, center):
        d = self.patch_.d
        N, K, half = self.N_, self.K_, self.half_
        k0 = np.rint(np.asarray(center) * N - 0.5).astype(int) + K
        lo = k0 - half + 1
        ax = [(lo[i] + np.arange(self.window_) - K + 0.5) / N for i in range(d)]
        w = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
        return tuple(int(x) for x in lo), w

    def _gather(self, g, lo):
        d = g.patch.d
        n = self.window_
        out = np.zeros((n,) * d, dtype=complex)
        src, dst = [], []
        for ax in range(d):
            a = max(lo[ax], 0)
            b = min(lo[ax] + n, 2 * g.K)
            if b <= a:
                return None
            src.append(slice(a, b))
            dst.append(slice(a - lo[ax], b - lo[ax]))
        out[tuple(dst)] = g.samples[tuple(src)]
        mask = np.zeros_like(out, dtype=bool)
        mask[tuple(dst)] = g.mask[tuple(src)]
        return out, mask

    def transform(self, X):
        """Decompose a density into a :class:`PacketSet`."""
        check_is_fitted(self, "caps_")
        g = X
        if g.N != self.N_ or g.K != self.K_ or g.patch is not self.patch_:
            raise ValueError("density grid differs from the fitted one")
        d = g.patch.d
        rho = self.cap_radius_
        n = self.window_
        gnorm = g.norm()
        packets = {}
        if gnorm == 0:
            return PacketSet(self.R, self.delta, g, packets, self.caps_, self.v1d_)
        thresh2 = (self.prune * gnorm) ** 2
        cell = g.cell_volume
        for t, cap in enumerate(self.caps_):
            lo, w = self._window(cap.center)
            gathered = self._gather(g, lo)
            if gathered is None:
                continue
            vals, mask = gathered
            raw = self._psi_raw(w)
            denom = raw.sum(axis=-1)
            psi = np.where(denom > 0, raw[..., t] / np.where(denom > 0, denom, 1), 0)
            f = psi * vals
            if not np.any(f):
                continue
            rr = np.sqrt(np.sum((w - cap.c) ** 2, axis=-1)) / rho
            tilde = plateau(rr, self.psi_support + self.plateau_margin, self.taper_end) * mask
            # spatial representation (up to a fixed phase, undone by the inverse)
            P = sfft.fftn(f)
            for vidx, eta in self._eta_products(P):
                piece = sfft.ifftn(P * eta) * tilde
                m2 = float(np.sum(np.abs(piece) ** 2) * cell)
                if m2 <= thresh2:
                    continue
                v = tuple(float(self.v1d_[i]) for i in vidx)
                idx = PacketIndex(cap, v)
                packets[idx] = Packet(idx, t, lo, piece, m2)
        return PacketSet(self.R, self.delta, g, packets, self.caps_, self.v1d_)

    def _eta_products(self, P):
        """Yield spatial-lattice index tuples and the matching eta_v on the window.

        ``fftn`` uses ``exp(-2 pi i j k / n)``; the sample ``j`` corresponds to
        spatial position ``-x_local[j]``, so the table is applied reversed.
        """
        d = P.ndim
        table = self.eta1d_[:, (-np.arange(self.window_)) % self.window_]
        mass = np.abs(P) ** 2
        if d == 1:
            sig = table @ mass
            for i in np.nonzero(sig > 0)[0]:
                yield (i,), table[i]
        else:
            sig = table @ mass @ table.T
            for i, j in zip(*np.nonzero(sig > 0)):
                yield (i, j), table[i][:, None] * table[j][None, :]

    def inverse_transform(self, X):
        """Sum of all packets."""
        return X.density()


def decompose(g, R, delta=0.05, **kw):
    """Wave packets of ``g`` at scale ``R`` (functional form of the decomposer)."""
    return WavePacketDecomposer(R=R, delta=delta, **kw).fit(g).transform(g)


def check_reconstruction(g, pset):
    """``||g - sum g_{theta,v}||_inf / ||g||_2`` (0 for ``g = 0``)."""
    nrm = g.norm()
    if nrm == 0:
        return 0.0
    rec = pset.density()
    return float(np.max(np.abs(g.samples - rec.samples)) / nrm)


def check_orthogonality(pset, subset):
    """``||sum_W g||^2 / sum_W ||g||^2``; 1 for an empty subset."""
    subset = list(subset)
    if not subset:
        return 1.0
    num = pset.density(subset).norm2()
    den = sum(pset[i].norm2 for i in subset)
    return float(num / den)


def _packet_field(pset, idx, R=None, spacing=1.0):
    R = pset.R if R is None else R
    return extend_fast_grid(pset.density([idx]), R, spacing)


def check_decay(pset, idx, R=None):
    """``max |Eg_T|`` on ``B_R`` outside ``2T`` divided by ``max |Eg_T|`` on ``T``."""
    R = pset.R if R is None else R
    F = _packet_field(pset, idx, R)
    pts = F.grid.points()
    a = np.abs(F.samples).ravel()
    inball = np.sum(pts * pts, axis=1) <= R * R
    T = pset.tube(idx)
    on = T.contains(pts) & inball
    off = ~T.contains(pts, 2.0) & inball
    if not np.any(on):
        return np.inf
    return float(a[off].max() / a[on].max()) if np.any(off) else 0.0


def essential_support(pset, idx, R=None):
    """Fraction of ``int_{B_R} |Eg_T|^2`` carried by ``2T``."""
    R = pset.R if R is None else R
    F = _packet_field(pset, idx, R)
    pts = F.grid.points()
    a2 = np.abs(F.samples).ravel() ** 2
    inball = np.sum(pts * pts, axis=1) <= R * R
    in2T = pset.tube(idx).contains(pts, 2.0) & inball
    tot = a2[inball].sum()
    return float(a2[in2T].sum() / tot) if tot > 0 else 1.0


def local_constancy_check(g_tau, rho, R, rng, n_tubes=50, cap=None, direction=None, field=None):
    """Largest ``sup_T |Eg|^2 / mean_{2T} |Eg|^2`` over random tubes.

    Tubes have radius ``rho^{1/2}``, length ``rho`` and direction ``N(tau)``
    (``tau`` inferred from the support of ``g_tau`` unless ``cap`` is given).
    Their centres are uniform in ``B_{R - rho/2}``; ``2T`` is clipped to the
    evaluation box. A different ``direction`` gives the negative control.
    """
    if rho < 4:
        raise ScaleError("local constancy needs rho >= 4")
    patch = g_tau.patch
    if cap is None:
        w = g_tau.omega()[np.abs(g_tau.samples) > 0]
        if len(w) == 0:
            return 1.0
        cap = Cap(tuple(w.mean(axis=0)), rho**-0.5)
    u = normal(patch, cap.c) if direction is None else np.asarray(direction, float)
    u = u / np.linalg.norm(u)
    F = extend_fast_grid(g_tau, R) if field is None else field
    pts = F.grid.points()
    a2 = np.abs(F.samples).ravel() ** 2
    n = patch.dim
    worst = 0.0
    for _ in range(n_tubes):
        c = rng.normal(size=n)
        c *= (R - rho / 2) * rng.random() ** (1 / n) / np.linalg.norm(c)
        T = Tube(tuple(c), tuple(u), rho**0.5, rho)
        s, r = T.coordinates(pts)
        on = (np.abs(s) <= rho / 2) & (r <= rho**0.5)
        on2 = (np.abs(s) <= rho) & (r <= 2 * rho**0.5)
        if not np.any(on):
            continue
        worst = max(worst, float(a2[on].max() / a2[on2].mean()))
    return worst
