import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtlab.bumps import bump, plateau, smoothstep
from mtlab.errors import DomainError, GeometryError
from mtlab.geometry import (
    Cap,
    Tube,
    angle_to_vertical,
    cap_cover,
    cover_counts,
    make_patch,
    normal,
    paraboloid,
    sphere_cap,
    surface_point,
)
from mtlab.grids import Field, Grid, Weight, box_grid, export_csv, load_array, save_array


# ---------------------------------------------------------------- bumps


@given(st.floats(-3, 3))
def test_smoothstep_range_and_symmetry(t):
    s = float(smoothstep(t))
    assert 0.0 <= s <= 1.0
    assert s + float(smoothstep(1 - t)) == pytest.approx(1.0, abs=1e-12)


def test_smoothstep_endpoints():
    assert smoothstep(np.array([-1.0, 0.0, 1.0, 2.0])).tolist() == [0.0, 0.0, 1.0, 1.0]
    assert float(smoothstep(0.5)) == pytest.approx(0.5)


def test_plateau_levels():
    r = np.array([0.0, 0.5, 1.0, 2.0, 3.0])
    assert plateau(r, 1.0, 2.0).tolist() == [1.0, 1.0, 1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        plateau(r, 2.0, 1.0)


def test_bump_support_and_peak():
    s = np.linspace(-1.5, 1.5, 301)
    b = bump(s)
    assert np.all(b[np.abs(s) >= 1] == 0)
    assert b.max() == pytest.approx(np.exp(-1.0))


# ---------------------------------------------------------------- grids


def test_box_grid_shape_and_points():
    g = box_grid(2, 2, 0.5)
    assert g.shape == (9, 9)
    pts = g.points()
    assert pts.min() == -2.0 and pts.max() == 2.0
    assert g.cell_volume == 0.25
    with pytest.raises(ValueError):
        box_grid(1.3, 2, 0.5)


def test_weight_rejects_negative_and_checks_regularity():
    g = box_grid(2, 2)
    with pytest.raises(ValueError):
        Weight(g, -np.ones(g.shape))
    spiky = np.ones(g.shape)
    spiky[2, 2] = 100.0
    assert Weight(g, spiky).regularity() == pytest.approx(100.0)
    with pytest.raises(ValueError):
        Weight(g, spiky, regular=True)


def test_weight_addition_needs_same_grid():
    a = Weight(box_grid(2, 2), np.ones((5, 5)))
    b = Weight(box_grid(2, 2, 0.5), np.ones((9, 9)))
    with pytest.raises(GeometryError):
        a + b
    assert (a + a).total() == pytest.approx(50.0)


@pytest.mark.parametrize("cplx", [False, True])
def test_array_roundtrip(tmp_path, cplx, rng):
    g = box_grid(3, 2, 0.5)
    x = rng.normal(size=g.shape) + (1j * rng.normal(size=g.shape) if cplx else 0)
    p = tmp_path / "a.mtla"
    save_array(p, g, x)
    g2, y = load_array(p)
    assert g2.same_as(g)
    np.testing.assert_array_equal(x, y)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope" + bytes(40))
    with pytest.raises(ValueError):
        load_array(p)


def test_export_csv_rows(tmp_path):
    g = box_grid(1, 2)
    export_csv(tmp_path / "f.csv", g, np.arange(9.0).reshape(3, 3))
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,value"
    assert len(lines) == 10


def test_field_shape_check():
    with pytest.raises(ValueError):
        Field(box_grid(1, 2), np.zeros((2, 2)))


# ---------------------------------------------------------------- geometry


@pytest.mark.parametrize("factory", [paraboloid, sphere_cap])
@pytest.mark.parametrize("dim", [2, 3])
def test_patch_gradients_and_convexity(factory, dim):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = factory(dim).validate()
    assert rep["grad_mismatch"] < 1e-5
    assert rep["min_hess_eig"] > 0


def test_make_patch_unknown_name():
    with pytest.raises(ValueError):
        make_patch("saddle")


@given(st.floats(-0.5, 0.5))
def test_normal_is_unit_and_orthogonal_to_tangent(w):
    p = paraboloid(2)
    nu = normal(p, np.array([[w]]))[0]
    assert np.linalg.norm(nu) == pytest.approx(1.0)
    tangent = np.array([1.0, float(p.grad_h(np.array([w]))[0])])
    assert abs(nu @ tangent) < 1e-12


def test_angle_to_vertical_paraboloid():
    p = paraboloid(2, a=0.5)
    assert float(angle_to_vertical(p, np.array([0.0]))) == pytest.approx(0.0)
    assert float(angle_to_vertical(p, np.array([0.5]))) == pytest.approx(np.arctan(0.5))


def test_domain_error():
    with pytest.raises(DomainError):
        surface_point(paraboloid(2), 0.7)


@pytest.mark.parametrize("dim,radius", [(2, 0.1), (2, 0.033), (3, 0.1)])
def test_cap_cover_covers_with_bounded_overlap(dim, radius, rng):
    p = paraboloid(dim)
    caps = cap_cover(p, radius)
    x = rng.normal(size=(2000, dim - 1))
    x *= (p.domain_radius * rng.random(2000) ** (1 / (dim - 1)) / np.linalg.norm(x, axis=1))[:, None]
    counts = cover_counts(caps, x)
    assert counts.min() >= 1
    assert counts.max() <= 3 ** (dim - 1)


def test_cap_contains_scale():
    c = Cap((0.1,), 0.05)
    assert c.contains(np.array([[0.14]]))[0]
    assert not c.contains(np.array([[0.2]]))[0]
    assert c.contains(np.array([[0.2]]), scale=2.0)[0]


def test_tube_membership_and_volume():
    T = Tube((0.0, 0.0), (0.0, 2.0), 1.0, 4.0)
    assert T.direction == (0.0, 1.0)
    pts = np.array([[0.0, 2.0], [1.0, 0.0], [1.01, 0.0], [0.0, 2.01], [0.0, 3.9]])
    assert T.contains(pts).tolist() == [True, True, False, False, False]
    assert T.contains(pts, 2.0).tolist() == [True, True, True, True, True]
    assert T.volume() == 8.0
    assert Tube((0, 0, 0), (0, 0, 1), 1.0, 2.0).volume() == pytest.approx(2 * np.pi)


@given(st.floats(-np.pi, np.pi), st.floats(0.1, 5), st.floats(0.1, 5))
def test_tube_contains_is_rotation_invariant(phi, r, L):
    u = np.array([np.cos(phi), np.sin(phi)])
    T = Tube((0.0, 0.0), tuple(u), r, L)
    e = np.array([-u[1], u[0]])
    inside = 0.49 * L * u + 0.99 * r * e
    outside = 0.51 * L * u
    assert T.contains(inside[None])[0]
    assert not T.contains(outside[None])[0]


def test_grid_index_of():
    g = Grid((-1.0, -1.0), 0.5, (5, 5))
    assert tuple(g.index_of(np.array([0.0, 0.5]))) == (2, 3)
