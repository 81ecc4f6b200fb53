"""Regular spatial grids, fields, weights and their file formats.

Binary layout (little endian)::

    magic   4 bytes  b"MTLG"
    version uint32   1
    ndim    uint32
    dtype   uint32   0 = float64, 1 = complex128
    shape   uint64 * ndim
    origin  float64 * ndim
    spacing float64
    data    row-major array
"""
from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

__all__ = ["Grid", "Field", "Weight", "box_grid", "save_array", "load_array", "export_csv"]

_MAGIC = b"MTLG"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}


@dataclass(frozen=True)
class Grid:
    """Axis-aligned regular grid: ``origin + spacing * index``."""

    origin: tuple
    spacing: float
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", float(self.spacing))
        if len(self.origin) != len(self.shape):
            raise ValueError("origin and shape must have equal length")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def cell_volume(self):
        return self.spacing**self.ndim

    def axes(self):
        return [o + self.spacing * np.arange(s) for o, s in zip(self.origin, self.shape)]

    def mesh(self):
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self):
        """All grid points, shape ``(prod(shape), ndim)`` in row-major order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=-1)

    def radius_sq(self):
        return sum(m * m for m in self.mesh())

    def ball_mask(self, R, center=None):
        if center is None:
            return self.radius_sq() <= R * R * (1 + 1e-12)
        mesh = self.mesh()
        d2 = sum((m - c) ** 2 for m, c in zip(mesh, center))
        return d2 <= R * R * (1 + 1e-12)

    def index_of(self, x):
        """Nearest grid index of points ``x`` (may fall outside the grid)."""
        x = np.asarray(x, dtype=float)
        return np.rint((x - np.asarray(self.origin)) / self.spacing).astype(int)

    def same_as(self, other, tol=1e-12):
        return (
            self.shape == other.shape
            and abs(self.spacing - other.spacing) <= tol
            and np.allclose(self.origin, other.origin, atol=tol, rtol=0)
        )


def box_grid(R, n, spacing=1.0):
    """Grid on ``[-R, R]^n`` with the given spacing (``R/spacing`` must be an integer)."""
    m = R / spacing
    if abs(m - round(m)) > 1e-9:
        raise ValueError("R must be a multiple of the spacing")
    m = int(round(m))
    return Grid((-m * spacing,) * n, spacing, (2 * m + 1,) * n)


class Field:
    """Complex samples on a grid (for example ``Eg``)."""

    def __init__(self, grid, samples):
        samples = np.asarray(samples)
        if samples.shape != grid.shape:
            raise ValueError(f"samples shape {samples.shape} != grid shape {grid.shape}")
        if grid.spacing > 1 + 1e-12:
            raise ValueError("field spacing must be at most 1")
        self.grid = grid
        self.samples = samples.astype(complex, copy=False)

    def __repr__(self):
        return f"Field(shape={self.grid.shape}, spacing={self.grid.spacing})"

    def abs2(self):
        return np.abs(self.samples) ** 2


class Weight:
    """Non-negative samples on a grid.

    ``regular=True`` declares the weight roughly constant at unit scale; this
    is certified by :meth:`regularity` (maximal ratio between a cell and its
    axis neighbours, over the support).
    """

    REGULARITY_BOUND = 16.0

    def __init__(self, grid, samples, regular=False, meta=None):
        samples = np.asarray(samples, dtype=float)
        if samples.shape != grid.shape:
            raise ValueError(f"samples shape {samples.shape} != grid shape {grid.shape}")
        if np.any(samples < 0) or not np.all(np.isfinite(samples)):
            raise ValueError("weight samples must be finite and non-negative")
        self.grid = grid
        self.samples = samples
        self.regular = regular
        self.meta = dict(meta or {})
        if regular:
            ratio = self.regularity()
            if ratio > self.REGULARITY_BOUND:
                raise ValueError(f"weight regularity ratio {ratio:.3g} exceeds {self.REGULARITY_BOUND}")

    def __repr__(self):
        return f"Weight(shape={self.grid.shape}, spacing={self.grid.spacing})"

    def regularity(self):
        """Largest ratio ``w(x)/w(y)`` over neighbouring cells that are both positive."""
        worst = 1.0
        w = self.samples
        for ax in range(w.ndim):
            a = np.take(w, np.arange(w.shape[ax] - 1), axis=ax)
            b = np.take(w, np.arange(1, w.shape[ax]), axis=ax)
            both = (a > 0) & (b > 0)
            if np.any(both):
                r = np.maximum(a[both] / b[both], b[both] / a[both])
                worst = max(worst, float(r.max()))
        return worst

    def total(self):
        return float(self.samples.sum() * self.grid.cell_volume)

    def scaled(self, c):
        return Weight(self.grid, c * self.samples, meta=self.meta)

    def __add__(self, other):
        if not self.grid.same_as(other.grid):
            raise GeometryError("weights live on different grids")
        return Weight(self.grid, self.samples + other.samples)


def save_array(path, grid, samples):
    """Write a grid array in the binary layout described in the module docstring."""
    samples = np.asarray(samples)
    code = 1 if np.iscomplexobj(samples) else 0
    data = np.ascontiguousarray(samples, dtype=_DTYPES[code])
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", 1, grid.ndim, code))
        fh.write(struct.pack(f"<{grid.ndim}Q", *grid.shape))
        fh.write(struct.pack(f"<{grid.ndim}d", *grid.origin))
        fh.write(struct.pack("<d", grid.spacing))
        fh.write(data.tobytes(order="C"))


def load_array(path):
    """Read a file written by :func:`save_array`; returns ``(grid, samples)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not an mtlab grid file")
        version, ndim, code = struct.unpack("<III", fh.read(12))
        if version != 1 or code not in _DTYPES:
            raise ValueError(f"{path}: unsupported version or dtype")
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        origin = struct.unpack(f"<{ndim}d", fh.read(8 * ndim))
        (spacing,) = struct.unpack("<d", fh.read(8))
        data = np.frombuffer(fh.read(), dtype=_DTYPES[code])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: truncated data")
    return Grid(origin, spacing, shape), data.reshape(shape).copy()


def export_csv(path, grid, samples, max_points=1_000_000):
    """Write one row per grid point: coordinates then value (real, imag for complex)."""
    samples = np.asarray(samples)
    if samples.size > max_points:
        raise ValueError(f"grid has {samples.size} points; CSV export limited to {max_points}")
    names = [f"x{i}" for i in range(grid.ndim)]
    cplx = np.iscomplexobj(samples)
    header = names + (["re", "im"] if cplx else ["value"])
    axes = grid.axes()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for idx in itertools.product(*(range(s) for s in grid.shape)):
            coords = [f"{axes[k][i]:.12g}" for k, i in enumerate(idx)]
            v = samples[idx]
            vals = [f"{v.real:.17g}", f"{v.imag:.17g}"] if cplx else [f"{float(v):.17g}"]
            wr.writerow(coords + vals)
