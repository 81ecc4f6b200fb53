"""Hypersurface patches, caps, tubes and cap covers.

A patch is the graph ``Sigma(omega) = (omega, h(omega))`` of a convex function
over the ball of radius ``domain_radius`` in ``R^{n-1}``. Frequencies ``omega``
are arrays whose last axis has length ``n - 1``.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError

__all__ = [
    "SurfacePatch",
    "Cap",
    "Tube",
    "paraboloid",
    "shallow_paraboloid",
    "sphere_cap",
    "make_patch",
    "surface_point",
    "normal",
    "angle_to_vertical",
    "cap_cover",
    "cover_counts",
]


@dataclass(frozen=True, eq=False)
class SurfacePatch:
    """Graph of ``h`` over the ball of radius ``domain_radius`` in ``R^{dim-1}``.

    Parameters
    ----------
    dim : int
        Ambient dimension ``n``, 2 or 3.
    h, grad_h, hess_h : callable
        Vectorised height, gradient and Hessian. Inputs have shape
        ``(..., dim-1)``; outputs have shapes ``(...)``, ``(..., dim-1)``
        and ``(..., dim-1, dim-1)``.
    hess_bound : float
        Lower bound on the Hessian eigenvalues over the domain.
    domain_radius : float
        Radius of the parameter ball.
    grad_bound : float
        Upper bound on ``|grad h|`` over the domain.
    name : str
        Label used in configs and reports.
    """

    dim: int
    h: Callable
    grad_h: Callable
    hess_h: Callable
    hess_bound: float
    domain_radius: float = 1.0
    grad_bound: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.domain_radius <= 0 or self.hess_bound <= 0:
            raise ValueError("domain_radius and hess_bound must be positive")

    @property
    def d(self):
        """Dimension ``n - 1`` of the parameter domain."""
        return self.dim - 1

    def validate(self, n_samples=200, seed=0, fd_step=1e-6, fd_tol=1e-6):
        """Check gradient consistency and the convexity certificate.

        Returns a dict with the maximal finite-difference gradient mismatch
        and the minimal sampled Hessian eigenvalue. Raises ``ValueError`` if
        either check fails.
        """
        rng = np.random.default_rng(seed)
        pts = _uniform_ball(rng, n_samples, self.d, self.domain_radius * (1 - 2 * fd_step))
        g = self.grad_h(pts)
        fd = np.empty_like(g)
        for i in range(self.d):
            e = np.zeros(self.d)
            e[i] = fd_step
            fd[:, i] = (self.h(pts + e) - self.h(pts - e)) / (2 * fd_step)
        mismatch = float(np.max(np.abs(fd - g)))
        lattice = _lattice_in_ball(self.d, self.domain_radius, 15)
        eig = np.linalg.eigvalsh(self.hess_h(lattice))
        min_eig = float(eig.min())
        if mismatch > fd_tol:
            raise ValueError(f"gradient mismatch {mismatch:.3g} exceeds {fd_tol}")
        if min_eig < self.hess_bound * (1 - 1e-12):
            raise ValueError(f"Hessian eigenvalue {min_eig:.3g} below certificate")
        if self.grad_bound > 1e-2 + 1e-15:
            warnings.warn(
                f"patch '{self.name}' has normals up to "
                f"{np.degrees(np.arctan(self.grad_bound)):.1f} degrees off vertical",
                stacklevel=2,
            )
        return {"grad_mismatch": mismatch, "min_hess_eig": min_eig}


def paraboloid(dim=2, domain_radius=0.5, a=0.5, name="paraboloid"):
    """Patch ``h(omega) = a |omega|^2``."""

    def h(w):
        w = np.asarray(w, dtype=float)
        return a * np.sum(w * w, axis=-1)

    def grad_h(w):
        return 2 * a * np.asarray(w, dtype=float)

    def hess_h(w):
        w = np.asarray(w, dtype=float)
        d = w.shape[-1]
        return np.broadcast_to(2 * a * np.eye(d), w.shape[:-1] + (d, d)).copy()

    return SurfacePatch(
        dim=dim,
        h=h,
        grad_h=grad_h,
        hess_h=hess_h,
        hess_bound=2 * a,
        domain_radius=domain_radius,
        grad_bound=2 * a * domain_radius,
        name=name,
        params={"a": a, "domain_radius": domain_radius},
    )


def shallow_paraboloid(dim=2, domain_radius=1.0):
    """``h = |omega|^2 / 200`` on the unit ball; normals within 1/100 of vertical."""
    return paraboloid(dim, domain_radius, a=1.0 / 200.0, name="shallow")


def sphere_cap(dim=2, domain_radius=0.5):
    """Lower cap of the unit sphere, ``h = 1 - sqrt(1 - |omega|^2)``."""
    if domain_radius >= 1:
        raise ValueError("sphere cap needs domain_radius < 1")

    def h(w):
        w = np.asarray(w, dtype=float)
        return 1.0 - np.sqrt(1.0 - np.sum(w * w, axis=-1))

    def grad_h(w):
        w = np.asarray(w, dtype=float)
        return w / np.sqrt(1.0 - np.sum(w * w, axis=-1))[..., None]

    def hess_h(w):
        w = np.asarray(w, dtype=float)
        d = w.shape[-1]
        s = 1.0 - np.sum(w * w, axis=-1)
        eye = np.broadcast_to(np.eye(d), w.shape[:-1] + (d, d))
        outer = w[..., :, None] * w[..., None, :]
        return eye / np.sqrt(s)[..., None, None] + outer / (s ** 1.5)[..., None, None]

    r = domain_radius
    return SurfacePatch(
        dim=dim,
        h=h,
        grad_h=grad_h,
        hess_h=hess_h,
        hess_bound=1.0,
        domain_radius=r,
        grad_bound=r / np.sqrt(1 - r * r),
        name="sphere_cap",
        params={"domain_radius": r},
    )


_PATCHES = {
    "paraboloid": paraboloid,
    "shallow": shallow_paraboloid,
    "sphere_cap": sphere_cap,
}


def make_patch(name, dim=2, **params):
    """Build a named patch: ``paraboloid``, ``shallow`` or ``sphere_cap``."""
    try:
        factory = _PATCHES[name]
    except KeyError:
        raise ValueError(f"unknown surface '{name}'; choose from {sorted(_PATCHES)}") from None
    return factory(dim=dim, **params)


def _as_points(patch, omega):
    w = np.asarray(omega, dtype=float)
    if w.ndim == 0:
        w = w[None]
    if w.shape[-1] != patch.d:
        if patch.d == 1:
            w = w[..., None]
        else:
            raise ValueError(f"frequency must have last axis {patch.d}")
    return w


def _check_domain(patch, w):
    r = np.sqrt(np.sum(w * w, axis=-1))
    if np.any(r > patch.domain_radius * (1 + 1e-12)):
        raise DomainError(
            f"|omega| = {float(r.max()):.6g} exceeds domain radius {patch.domain_radius}"
        )


def surface_point(patch, omega):
    """Return ``(omega, h(omega))``."""
    w = _as_points(patch, omega)
    _check_domain(patch, w)
    return np.concatenate([w, patch.h(w)[..., None]], axis=-1)


def normal(patch, omega):
    """Unit normal ``(grad h, -1) / |(grad h, -1)|`` at ``omega``."""
    w = _as_points(patch, omega)
    _check_domain(patch, w)
    N = np.concatenate([patch.grad_h(w), -np.ones(w.shape[:-1] + (1,))], axis=-1)
    return N / np.linalg.norm(N, axis=-1, keepdims=True)


def angle_to_vertical(patch, omega):
    """Angle in radians between the normal at ``omega`` and the vertical axis."""
    nu = normal(patch, omega)
    return np.arccos(np.clip(-nu[..., -1], -1.0, 1.0))


@dataclass(frozen=True)
class Cap:
    """Ball in the parameter domain."""

    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("cap radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))

    @property
    def c(self):
        return np.asarray(self.center)

    def contains(self, omega, scale=1.0):
        """Membership of points in the closed ball dilated by ``scale``."""
        w = np.asarray(omega, dtype=float)
        if w.shape[-1] != len(self.center):
            w = w[..., None]
        return np.sum((w - self.c) ** 2, axis=-1) <= (scale * self.radius) ** 2 * (1 + 1e-12)


@dataclass(frozen=True)
class Tube:
    """Cylinder of given radius around the segment ``anchor +- (length/2) direction``."""

    anchor: tuple
    direction: tuple
    radius: float
    length: float

    def __post_init__(self):
        u = np.asarray(self.direction, dtype=float)
        nu = np.linalg.norm(u)
        if nu == 0:
            raise ValueError("tube direction must be non-zero")
        if abs(nu - 1) > 1e-12:
            u = u / nu
        if self.radius <= 0 or self.length <= 0:
            raise ValueError("tube radius and length must be positive")
        object.__setattr__(self, "direction", tuple(float(x) for x in u))
        object.__setattr__(self, "anchor", tuple(float(x) for x in np.asarray(self.anchor)))

    @property
    def a(self):
        return np.asarray(self.anchor)

    @property
    def u(self):
        return np.asarray(self.direction)

    def coordinates(self, x):
        """Axial coordinate and perpendicular distance of points ``x``."""
        y = np.asarray(x, dtype=float) - self.a
        s = y @ self.u
        perp = y - s[..., None] * self.u
        return s, np.sqrt(np.sum(perp * perp, axis=-1))

    def contains(self, x, scale=1.0):
        """Membership in the closed tube dilated by ``scale`` (radius and length).

        A relative slack of ``1e-9`` makes boundary points count as inside
        regardless of rounding.
        """
        s, r = self.coordinates(x)
        slack = 1 + 1e-9
        return (np.abs(s) <= scale * self.length / 2 * slack) & (r <= scale * self.radius * slack)

    def dilate(self, scale):
        return Tube(self.anchor, self.direction, self.radius * scale, self.length * scale)

    def volume(self):
        n = len(self.anchor)
        if n == 2:
            return 2 * self.radius * self.length
        return np.pi * self.radius**2 * self.length


def _uniform_ball(rng, m, d, r):
    x = rng.normal(size=(m, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    rad = r * rng.random(m) ** (1.0 / d)
    return x * rad[:, None]


def _lattice_in_ball(d, r, k):
    ax = np.linspace(-r, r, k)
    pts = np.array(list(itertools.product(ax, repeat=d)))
    return pts[np.sum(pts * pts, axis=1) <= r * r]


def cap_cover(patch, radius):
    """Cover the parameter domain by caps centred on the lattice ``radius * Z^{n-1}``.

    A lattice centre is kept when its Voronoi cell (a cube of side
    ``radius``) meets the open domain. Every domain point then lies within
    ``radius * sqrt(n-1)/2`` of a kept centre, so the caps cover with room to
    spare, and at most ``3^{n-1}`` closed caps contain any point.
    """
    if not 0 < radius <= 2 * patch.domain_radius * (1 + 1e-12):
        raise ValueError("need 0 < radius <= 2 * domain_radius")
    r = patch.domain_radius
    kmax = int(np.ceil(r / radius)) + 1
    ks = np.arange(-kmax, kmax + 1)
    caps = []
    for idx in itertools.product(ks, repeat=patch.d):
        c = np.asarray(idx, dtype=float) * radius
        nearest = np.clip(np.zeros(patch.d), c - radius / 2, c + radius / 2)
        if np.linalg.norm(nearest) < r * (1 - 1e-12):
            caps.append(Cap(tuple(c), radius))
    return caps


def cover_counts(caps, omega):
    """Number of closed caps containing each point of ``omega``."""
    w = np.asarray(omega, dtype=float)
    centers = np.array([c.center for c in caps])
    radii = np.array([c.radius for c in caps])
    d2 = np.sum((w[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    return np.sum(d2 <= (radii**2)[None, :] * (1 + 1e-12), axis=1)
