"""The extension operator ``Eg(x) = int exp(2 pi i <x, Sigma(omega)>) g(omega) d omega``.

Densities live on a cell-centred frequency grid ``omega_k = (k + 1/2) / N``,
``k = -K .. K-1`` per axis, masked to the parameter ball. Two evaluation
paths share that quadrature:

* :func:`extend_direct` sums the quadrature at arbitrary points;
* :func:`extend_fast_grid` evaluates every horizontal slice ``t`` of a box
  grid with one inverse FFT of ``g * exp(2 pi i t h)``.

The two agree to rounding error because they compute the same finite sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import BudgetError, GeometryError, ResolutionError
from .geometry import Cap
from .grids import Field, Grid, box_grid

__all__ = [
    "Density",
    "QuadratureSpec",
    "samples_per_unit",
    "extend_direct",
    "extend_fast_grid",
    "weighted_l2",
    "random_smooth_density",
    "cap_indicator_density",
    "bump_density",
    "point_mass_density",
    "ExtensionOperator",
]

DEFAULT_BUDGET = 2 * 1024**3


def samples_per_unit(patch, R_max):
    """Smallest admissible ``N`` (grid spacing ``1/N``) for extension to scale ``R_max``.

    The spacing must not exceed ``1 / (8 R_max (1 + max|grad h|))``. ``N`` is
    rounded up so that ``domain_radius * N`` is an integer whenever the
    radius is a simple fraction, which makes the cells tile the domain box.
    """
    N = int(np.ceil(8 * R_max * (1 + patch.grad_bound) - 1e-9))
    r = patch.domain_radius
    for mult in range(N, 2 * N + 2):
        if abs(r * mult - round(r * mult)) < 1e-9:
            return mult
    return N


class Density:
    """Samples of ``g`` on the frequency grid of a patch.

    Parameters
    ----------
    patch : SurfacePatch
    N : int
        Samples per unit length; grid spacing is ``1/N``.
    samples : complex array of shape ``(2K,) * (n-1)``
        Values at the cell centres; entries outside the domain are ignored
        (forced to zero).
    R_max : float
        Largest spatial scale the density is certified for.
    func : callable, optional
        Exact form of ``g`` used when the quadrature is refined.
    """

    def __init__(self, patch, N, samples, R_max, func=None):
        self.patch = patch
        self.N = int(N)
        samples = np.asarray(samples, dtype=complex)
        d = patch.d
        if samples.ndim != d or len(set(samples.shape)) != 1 or samples.shape[0] % 2:
            raise ValueError("samples must be a cube array with even side")
        self.K = samples.shape[0] // 2
        if self.spacing > 1.0 / (8 * R_max * (1 + patch.grad_bound)) * (1 + 1e-9):
            raise ResolutionError(
                f"spacing 1/{self.N} too coarse for R_max={R_max}; "
                f"need N >= {8 * R_max * (1 + patch.grad_bound):.1f}"
            )
        self.R_max = float(R_max)
        self.func = func
        self.mask = self._mask()
        self.samples = np.where(self.mask, samples, 0)

    @classmethod
    def grid_for(cls, patch, R_max, N=None):
        """Coordinates and mask for a density grid at scale ``R_max``."""
        N = samples_per_unit(patch, R_max) if N is None else int(N)
        K = int(np.ceil(patch.domain_radius * N - 1e-9))
        ax = (np.arange(-K, K) + 0.5) / N
        return N, K, ax

    @classmethod
    def from_function(cls, patch, func, R_max, N=None):
        """Sample ``func(omega)`` (``omega`` of shape ``(..., n-1)``) at the cell centres."""
        N, K, ax = cls.grid_for(patch, R_max, N)
        w = np.stack(np.meshgrid(*([ax] * patch.d), indexing="ij"), axis=-1)
        return cls(patch, N, func(w), R_max, func=func)

    @classmethod
    def zeros(cls, patch, R_max, N=None):
        N, K, _ = cls.grid_for(patch, R_max, N)
        return cls(patch, N, np.zeros((2 * K,) * patch.d, dtype=complex), R_max)

    @property
    def spacing(self):
        return 1.0 / self.N

    @property
    def axis(self):
        return (np.arange(-self.K, self.K) + 0.5) / self.N

    def omega(self):
        """Cell centres, shape ``(2K,)*(n-1) + (n-1,)``."""
        return np.stack(np.meshgrid(*([self.axis] * self.patch.d), indexing="ij"), axis=-1)

    def _mask(self):
        w = self.omega()
        return np.sum(w * w, axis=-1) <= self.patch.domain_radius**2 * (1 + 1e-12)

    @property
    def cell_volume(self):
        return self.spacing**self.patch.d

    def norm2(self):
        """``||g||_2^2`` by the midpoint rule."""
        return float(np.sum(np.abs(self.samples) ** 2) * self.cell_volume)

    def norm(self):
        return float(np.sqrt(self.norm2()))

    def with_samples(self, samples, func=None):
        return Density(self.patch, self.N, samples, self.R_max, func=func)

    def restrict(self, cap, scale=1.0):
        """Zero the samples outside ``cap`` (dilated by ``scale``)."""
        keep = cap.contains(self.omega(), scale)
        func = None
        if self.func is not None:
            f0 = self.func

            def func(w):
                return np.where(cap.contains(w, scale), f0(w), 0)

        return self.with_samples(np.where(keep, self.samples, 0), func)

    def modulate(self, y):
        """Multiply by ``exp(2 pi i <y, Sigma(omega)>)``; translates ``Eg`` by ``-y``."""
        y = np.asarray(y, dtype=float)
        patch = self.patch

        def phase(w):
            return np.exp(2j * np.pi * (w @ y[:-1] + y[-1] * patch.h(w)))

        func = None
        if self.func is not None:
            f0 = self.func

            def func(w):
                return phase(w) * f0(w)

        return self.with_samples(self.samples * phase(self.omega()), func)

    def __add__(self, other):
        self._check_compatible(other)
        func = None
        if self.func is not None and other.func is not None:
            f1, f2 = self.func, other.func

            def func(w):
                return f1(w) + f2(w)

        return self.with_samples(self.samples + other.samples, func)

    def __mul__(self, c):
        func = None
        if self.func is not None:
            f0 = self.func

            def func(w):
                return c * f0(w)

        return self.with_samples(self.samples * c, func)

    __rmul__ = __mul__

    def _check_compatible(self, other):
        if other.patch is not self.patch or other.N != self.N or other.K != self.K:
            raise GeometryError("densities live on different grids")

    def __repr__(self):
        return f"Density(patch={self.patch.name}, N={self.N}, K={self.K}, R_max={self.R_max})"


@dataclass(frozen=True)
class QuadratureSpec:
    """Quadrature rule on the frequency grid.

    ``refinement`` splits every cell into ``refinement^(n-1)`` sub-cells;
    sub-cell values come from ``Density.func`` when available and are
    otherwise constant across the parent cell. ``surface_measure`` inserts
    the Jacobian ``sqrt(1 + |grad h|^2)``.
    """

    rule: str = "midpoint"
    refinement: int = 1
    surface_measure: bool = False

    def __post_init__(self):
        if self.rule not in ("midpoint", "trapezoid"):
            raise ValueError("rule must be 'midpoint' or 'trapezoid'")
        if int(self.refinement) < 1:
            raise ValueError("refinement must be >= 1")


def _quadrature_nodes(g, q):
    """Nodes and weighted values of the quadrature for ``g`` under ``q``.

    Returns ``(omega, array, N_eff, K_eff)``: the refined cell centres, the
    values times quadrature weights on the refined cube grid (zero outside
    the domain), and the refined grid parameters.
    """
    d = g.patch.d
    p = int(q.refinement)
    N_eff, K_eff = g.N * p, g.K * p
    if p == 1:
        w = g.omega()
        arr = g.samples.copy()
    else:
        ax = (np.arange(-K_eff, K_eff) + 0.5) / N_eff
        w = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1)
        mask = g.mask
        for k in range(d):
            mask = np.repeat(mask, p, axis=k)
        if g.func is not None:
            arr = np.where(mask, np.asarray(g.func(w), dtype=complex), 0)
        else:
            arr = g.samples
            for k in range(d):
                arr = np.repeat(arr, p, axis=k)
    if q.rule == "trapezoid":
        wt = np.ones(2 * K_eff)
        wt[0] = wt[-1] = 0.5
        for k in range(d):
            shape = [1] * d
            shape[k] = -1
            arr = arr * wt.reshape(shape)
    if q.surface_measure:
        gr = g.patch.grad_h(w)
        arr = arr * np.sqrt(1 + np.sum(gr * gr, axis=-1))
    return w, arr * (1.0 / N_eff) ** d, N_eff, K_eff


def _check_points(g, pts):
    if pts.size and np.max(np.abs(pts)) > g.R_max * (1 + 1e-12):
        raise ResolutionError(
            f"point with |x|_inf = {np.max(np.abs(pts)):.6g} beyond R_max = {g.R_max}"
        )


def extend_direct(g, points, q=QuadratureSpec(), chunk_bytes=64 * 1024**2):
    """Evaluate ``Eg`` at ``points`` (shape ``(m, n)``) by direct summation."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != g.patch.dim:
        raise ValueError(f"points must have last axis {g.patch.dim}")
    _check_points(g, pts)
    w, arr, _, _ = _quadrature_nodes(g, q)
    nz = arr != 0
    w = w[nz]
    a = arr[nz]
    hw = g.patch.h(w)
    nodes = np.concatenate([w, hw[:, None]], axis=1)
    out = np.zeros(len(pts), dtype=complex)
    step = max(1, int(chunk_bytes // (16 * max(len(a), 1))))
    for start in range(0, len(pts), step):
        x = pts[start : start + step]
        phase = 2 * np.pi * (x @ nodes.T)
        out[start : start + step] = np.exp(1j * phase) @ a
    return out


def _fold(arr, M, axis):
    """Sum ``arr`` over indices congruent mod ``M`` along ``axis``."""
    L = arr.shape[axis]
    if L <= M:
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (0, M - L)
        return np.pad(arr, pad)
    reps = -(-L // M)
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (0, reps * M - L)
    a = np.pad(arr, pad)
    shape = a.shape[:axis] + (reps, M) + a.shape[axis + 1 :]
    return a.reshape(shape).sum(axis=axis)


def extend_fast_grid(
    g,
    R,
    spacing=1.0,
    q=QuadratureSpec(),
    memory_budget=DEFAULT_BUDGET,
    workers=None,
):
    """Evaluate ``Eg`` on the box grid ``[-R, R]^n`` with step ``spacing``.

    ``1/spacing`` must be an integer. Each slice ``x_n = t`` is
    ``sum_k a_k exp(2 pi i t h(omega_k)) exp(2 pi i <x', omega_k>)``, an
    inverse DFT of length ``M = N_eff / spacing`` after folding the
    ``omega``-index modulo ``M``.
    """
    d = g.patch.d
    m = 1.0 / spacing
    if abs(m - round(m)) > 1e-9:
        raise ValueError("spacing must be 1/integer")
    m = int(round(m))
    if R > g.R_max * (1 + 1e-12):
        raise ResolutionError(f"R = {R} exceeds the density's R_max = {g.R_max}")
    grid = box_grid(R, g.patch.dim, spacing)
    P = grid.shape[0]
    w, arr, N_eff, K_eff = _quadrature_nodes(g, q)
    M = N_eff * m
    if M < P:
        raise ResolutionError("frequency grid too coarse for the requested box")
    field_bytes = 16 * P ** (d + 1)
    slice_bytes = 16 * (M**d + arr.size) * 3
    batch = max(1, int(min(P, (memory_budget - field_bytes) // max(slice_bytes, 1))))
    if field_bytes + slice_bytes > memory_budget:
        raise BudgetError(field_bytes + slice_bytes, memory_budget)
    h = g.patch.h(w)
    jj = np.arange(P) - (P - 1) // 2
    # phase correction for the cell-centred offset and the index shift -K
    corr = np.exp(2j * np.pi * jj * (0.5 - K_eff) / M)
    idx = np.mod(jj, M)
    out = np.empty((P,) * (d + 1), dtype=complex)
    ts = grid.axes()[-1]
    axes = tuple(range(1, d + 1))
    for start in range(0, P, batch):
        tb = ts[start : start + batch]
        mod = arr[None] * np.exp(2j * np.pi * tb.reshape((-1,) + (1,) * d) * h[None])
        for ax in axes:
            mod = _fold(mod, M, ax)
        spec = sfft.ifftn(mod, s=(M,) * d, axes=axes, workers=workers) * (M**d)
        if d == 1:
            sl = spec[:, idx] * corr[None, :]
            out[:, start : start + batch] = sl.T
        else:
            sl = spec[:, idx][:, :, idx] * corr[None, :, None] * corr[None, None, :]
            out[:, :, start : start + batch] = np.moveaxis(sl, 0, -1)
    return Field(grid, out)


def weighted_l2(field, w, R=None):
    """``sum_{|x| <= R} |F(x)|^2 w(x) spacing^n`` over the shared grid."""
    if not field.grid.same_as(w.grid):
        raise GeometryError("field and weight grids differ")
    dens = np.abs(field.samples) ** 2 * w.samples
    if R is not None:
        dens = np.where(field.grid.ball_mask(R), dens, 0.0)
    return float(dens.sum() * field.grid.cell_volume)


def random_smooth_density(patch, R_max, rng, n_bumps=8, width=None, reach=None, N=None):
    """Random sum of modulated Gaussian bumps, smooth and well inside the domain.

    Each term is ``a_j exp(-2 pi i <v_j, omega>) exp(-|omega - c_j|^2 / (2 width^2))``
    with complex Gaussian ``a_j``, centres ``|c_j| <= r - 4 width`` and
    spatial offsets ``|v_j| <= reach`` (default ``R_max / 8``). Its extension
    is concentrated in ``|x'| <= reach + R_max * max|grad h| + O(1/width)``.
    """
    r = patch.domain_radius
    d = patch.d
    width = 0.08 * r if width is None else width
    reach = R_max / 8 if reach is None else reach
    amp = rng.normal(size=n_bumps) + 1j * rng.normal(size=n_bumps)
    cdir = rng.normal(size=(n_bumps, d))
    cdir /= np.linalg.norm(cdir, axis=1, keepdims=True)
    c = cdir * ((r - 4 * width) * rng.random(n_bumps) ** (1 / d))[:, None]
    vdir = rng.normal(size=(n_bumps, d))
    vdir /= np.linalg.norm(vdir, axis=1, keepdims=True)
    v = vdir * (reach * rng.random(n_bumps) ** (1 / d))[:, None]

    def func(w):
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape[:-1], dtype=complex)
        for j in range(n_bumps):
            q = np.sum((w - c[j]) ** 2, axis=-1)
            out += amp[j] * np.exp(-2j * np.pi * (w @ v[j]) - q / (2 * width**2))
        return out

    return Density.from_function(patch, func, R_max, N)


def cap_indicator_density(patch, cap, R_max, N=None):
    """Indicator of a cap (sampled at cell centres)."""

    def func(w):
        return cap.contains(w).astype(complex)

    return Density.from_function(patch, func, R_max, N)


def bump_density(patch, cap, R_max, v=None, N=None):
    """``b(|omega - c| / r)``, optionally modulated by ``exp(-2 pi i <v, omega>)``.

    The modulation moves the centre of ``Eg(., 0)`` to ``x' = v``.
    """
    from .bumps import bump

    c = cap.c
    v = np.zeros(patch.d) if v is None else np.asarray(v, dtype=float)

    def func(w):
        w = np.asarray(w, dtype=float)
        rr = np.sqrt(np.sum((w - c) ** 2, axis=-1)) / cap.radius
        return bump(rr) * np.exp(-2j * np.pi * (w @ v))

    return Density.from_function(patch, func, R_max, N)


def point_mass_density(patch, omega0, R_max, N=None):
    """Unit value on the single cell nearest ``omega0``."""
    dens = Density.zeros(patch, R_max, N)
    w = dens.omega()
    dist = np.sum((w - np.asarray(omega0, dtype=float)) ** 2, axis=-1)
    s = np.zeros_like(dens.samples)
    s[np.unravel_index(np.argmin(dist), dist.shape)] = 1.0
    return dens.with_samples(s)


class ExtensionOperator(TransformerMixin, BaseEstimator):
    """Estimator wrapper mapping densities to box-grid fields.

    Parameters
    ----------
    R : float
        Half side of the output box ``[-R, R]^n``.
    spacing : float
        Grid step, ``1/integer``.
    rule, refinement, surface_measure
        Quadrature options, see :class:`QuadratureSpec`.
    memory_budget : int
        Bytes allowed for one evaluation.
    workers : int or None
        Threads passed to the FFT.
    """

    def __init__(self, R=16, spacing=1.0, rule="midpoint", refinement=1,
                 surface_measure=False, memory_budget=DEFAULT_BUDGET, workers=None):
        self.R = R
        self.spacing = spacing
        self.rule = rule
        self.refinement = refinement
        self.surface_measure = surface_measure
        self.memory_budget = memory_budget
        self.workers = workers

    def fit(self, X=None, y=None):
        self.quadrature_ = QuadratureSpec(self.rule, self.refinement, self.surface_measure)
        self.grid_ = None
        return self

    def _one(self, g):
        f = extend_fast_grid(g, self.R, self.spacing, self.quadrature_,
                             self.memory_budget, self.workers)
        self.grid_ = f.grid
        return f

    def transform(self, X):
        """Return a :class:`Field` for a density, or a list for a sequence of them."""
        if not hasattr(self, "quadrature_"):
            self.fit()
        if isinstance(X, Density):
            return self._one(X)
        return [self._one(g) for g in X]

    def evaluate(self, g, points):
        """Direct evaluation at arbitrary points with the same quadrature."""
        if not hasattr(self, "quadrature_"):
            self.fit()
        return extend_direct(g, points, self.quadrature_)
