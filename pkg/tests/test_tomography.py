import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtlab.errors import GeometryError
from mtlab.geometry import Cap, Tube, paraboloid
from mtlab.grids import Grid, Weight, box_grid
from mtlab.tomography import (
    Flake,
    Slab,
    a_functional,
    ball_line_mass,
    load_geometry,
    load_weight,
    slab_parallelism,
    star_weight,
    make_ball_union_weight,
    make_flake_weight,
    make_slab_weight,
    perp_basis,
    save_geometry,
    save_weight,
    tessellation_sum,
    tube_power_functional,
    tube_mass,
    tube_net,
    xray_profile,
    xray_sup,
    xray_sup_balls,
)


def brute_tube_mass(w, T, power=1.0):
    tot = 0.0
    for idx in itertools.product(*(range(s) for s in w.grid.shape)):
        x = np.asarray(w.grid.origin) + w.grid.spacing * np.asarray(idx)
        y = x - T.a
        s = y @ T.u
        d = math.sqrt(max(y @ y - s * s, 0.0))
        if abs(s) <= T.length / 2 * (1 + 1e-9) and d <= T.radius * (1 + 1e-9):
            tot += w.samples[idx] ** power
    return tot * w.grid.cell_volume


def brute_a_functional(w, rho, R, net):
    """Cell loop: pieces indexed from the tube end nearest the origin and the tube boundary.

    Pieces no larger than a grid cell are taken cell by cell.
    """
    n = w.grid.ndim
    p = (n + 1) / 2
    per_cell = rho ** ((n + 1) / 2) <= w.grid.cell_volume * (1 + 1e-12)
    r = math.sqrt(R)
    pts = w.grid.points()
    vals = w.samples.ravel() * w.grid.cell_volume
    best = 0.0
    for T in net.tubes():
        a = T.a @ T.u
        minus_end = abs(a - R / 2) >= abs(a + R / 2)
        E = perp_basis(T.u)
        pieces = {}
        for x, m in zip(pts, vals):
            if m == 0:
                continue
            y = x - T.a
            s = y @ T.u
            dy = E @ y
            if abs(s) > R / 2 * (1 + 1e-9) or dy @ dy > R * (1 + 1e-9):
                continue
            along = s + R / 2 if minus_end else R / 2 - s
            key = [min(int(math.floor(along / rho + 1e-9)), math.ceil(R / rho - 1e-9) - 1)]
            nc = math.ceil(2 * r / math.sqrt(rho) - 1e-9)
            key += [min(int(math.floor((c + r) / math.sqrt(rho) + 1e-9)), nc - 1) for c in dy]
            key = tuple(x) if per_cell else tuple(key)
            pieces[key] = pieces.get(key, 0.0) + m
        best = max(best, sum(v**p for v in pieces.values()))
    return rho ** (-(n - 1) / 2) * best ** (2 / (n + 1))


@pytest.fixture
def small_weight():
    g = box_grid(8, 2)
    rng = np.random.default_rng(3)
    s = rng.random(g.shape) * (rng.random(g.shape) < 0.4)
    return Weight(g, s)


def test_disc_chord():
    w = make_ball_union_weight([(0.0, 0.0)], 0.8, R=1, spacing=0.02)
    assert float(xray_sup(w)) == pytest.approx(1.6, rel=0.03)


def test_rectangle_diagonal():
    g = box_grid(2, 2, 0.02)
    X, Y = g.mesh()
    w = Weight(g, ((np.abs(X) <= 1.5) & (np.abs(Y) <= 0.5)).astype(float))
    assert float(xray_sup(w)) == pytest.approx(math.sqrt(10), rel=0.02)


def test_profile_of_constant_strip():
    g = box_grid(4, 2, 0.25)
    X, Y = g.mesh()
    w = Weight(g, (np.abs(X) <= 1).astype(float))
    vals = xray_profile(w, (1.0, 0.0), [0.0, 1.0], center=(0.0, 0.0))
    np.testing.assert_allclose(vals, 2.0, rtol=0.15)


def test_tube_mass_matches_cell_loop(small_weight):
    T = Tube((0.5, -1.0), (0.6, 0.8), 2.5, 9.0)
    for p in (1.0, 1.5):
        assert tube_mass(small_weight, T, p) == pytest.approx(brute_tube_mass(small_weight, T, p), rel=1e-12)


def test_a_functional_matches_cell_loop(small_weight):
    patch = paraboloid(2)
    E = [Cap((0.1,), 0.3)]
    net = tube_net(E, patch, 8)
    for rho in (2.0, 4.0):
        assert a_functional(small_weight, rho, 8, E, patch, net).value == pytest.approx(
            brute_a_functional(small_weight, rho, 8, net), rel=1e-12)


def test_a_functional_3d_matches_cell_loop():
    g = box_grid(4, 3)
    rng = np.random.default_rng(8)
    w = Weight(g, rng.random(g.shape) * (rng.random(g.shape) < 0.3))
    patch = paraboloid(3)
    E = [Cap((0.0, 0.2), 0.2)]
    net = tube_net(E, patch, 4)
    assert a_functional(w, 2.0, 4, E, patch, net).value == pytest.approx(brute_a_functional(w, 2.0, 4, net), rel=1e-12)


def test_cell_pieces_reduce_to_tube_power_mass(small_weight):
    patch = paraboloid(2)
    E = [Cap((0.0,), 0.5)]
    a = a_functional(small_weight, 1.0, 8, E, patch)
    b = tube_power_functional(small_weight, 8, E, patch)
    assert a.value == pytest.approx(b.value, rel=1e-12)


def test_holder_bound(small_weight):
    patch = paraboloid(2)
    res = a_functional(small_weight, 4.0, 8, [Cap((0.0,), 0.5)], patch)
    bound = res.tube_mass_sup ** (2 / 3) * res.piece_density_sup ** (1 / 3)
    assert res.value <= bound * (1 + 1e-12)


@pytest.mark.parametrize("lam", [4.0, 16.0])
def test_tessellation_sum_homogeneity_and_link(small_weight, lam):
    patch = paraboloid(2)
    rho = 4.0
    res = a_functional(small_weight, rho, 8, [Cap((0.0,), 0.5)], patch)
    t = tessellation_sum(small_weight, res.tube, rho)
    assert res.value == pytest.approx(t ** (2 / 3), rel=1e-12)
    scaled = tessellation_sum(small_weight.scaled(lam), res.tube, rho)
    assert scaled == pytest.approx(lam**1.5 * t, rel=1e-12)
    with pytest.raises(GeometryError):
        tessellation_sum(small_weight, Tube((0, 0), (0, 1), 1.0, 8.0), rho)


weights = st.lists(st.floats(0, 5), min_size=81, max_size=81).map(
    lambda v: np.asarray(v).reshape(9, 9))


@given(weights, weights, st.floats(0.1, 10))
def test_coarse_xray_monotone_and_homogeneous(a, b, lam):
    g = box_grid(4, 2)
    w1 = Weight(g, a)
    w2 = Weight(g, a + b)
    x1 = xray_sup(w1, refine=False, box="grid").value
    x2 = xray_sup(w2, refine=False, box="grid").value
    assert x1 <= x2 + 1e-9
    xl = xray_sup(w1.scaled(lam), refine=False, box="grid").value
    assert xl == pytest.approx(lam * x1, rel=1e-9, abs=1e-12)


def test_ball_xray_against_dense_sweep():
    C = np.array([[0.0, 0.0], [3.0, 0.4], [6.0, -0.3], [1.0, 5.0], [-4.0, 2.0]])
    best = 0.0
    for ang in np.linspace(0, np.pi, 2881):
        e = np.array([-np.sin(ang), np.cos(ang)])
        offs = np.arange(-8, 8, 0.005)
        chord = 2 * np.sqrt(np.clip(1 - ((C @ e)[None, :] - offs[:, None]) ** 2, 0, None))
        best = max(best, float(chord.sum(axis=1).max()))
    res = xray_sup_balls(C, 1.0)
    assert res.value == pytest.approx(best, abs=2e-3)
    assert ball_line_mass(C, 1.0, res.point, res.direction) == pytest.approx(res.value)
    assert xray_sup_balls(C[:1]).value == pytest.approx(2.0)
    assert xray_sup_balls(np.zeros((0, 2))).value == 0.0


def test_slab_overlap_rejected():
    s = Slab((0.0, 0.0), (0.0, 1.0), 3.0)
    with pytest.raises(GeometryError):
        make_slab_weight([s, Slab((0.0, 0.5), (0.0, 1.0), 3.0)], R=4, n=2)
    w = make_slab_weight([(s, 2.0)], R=4, n=2)
    assert set(np.unique(w.samples)) == {0.0, 2.0}


def test_steep_flake_rejected():
    with pytest.raises(GeometryError):
        make_flake_weight([Flake((0.0,), 2.0, slope=(200.0,))], R=4, n=2)
    w = make_flake_weight([Flake((0.0,), 2.0, curvature=0.1)], R=4, n=2)
    assert w.total() > 0


def test_geometry_and_weight_round_trip(tmp_path, small_weight):
    s = Slab((1.0, 2.0), (0.0, 1.0), 3.0, 0.5)
    f = Flake((0.5,), 2.0, offset=1.0, slope=(0.1,), curvature=0.2)
    C = np.array([[0.0, 0.0], [3.0, 1.0]])
    save_geometry(tmp_path / "g.json", [(s, 2.0)], [f], balls=C, radius=1.0)
    doc = load_geometry(tmp_path / "g.json")
    assert doc["slabs"] == [(s, 2.0)]
    assert doc["flakes"] == [f]
    np.testing.assert_array_equal(doc["balls"][0], C)
    save_weight(tmp_path / "w.npz", small_weight)
    back = load_weight(tmp_path / "w.npz")
    assert back.grid == small_weight.grid
    np.testing.assert_array_equal(back.samples, small_weight.samples)


def test_unit_ball_and_two_ball_chords():
    w = make_ball_union_weight([(0.0, 0.0)], 1.0, R=2, spacing=0.02)
    assert float(xray_sup(w)) == pytest.approx(2.0, rel=0.02)
    w = make_ball_union_weight([(-5.0, 0.0), (5.0, 0.0)], 1.0, R=7, spacing=0.02)
    assert float(xray_sup(w)) == pytest.approx(4.0, rel=0.02)
    assert xray_sup_balls([(-5.0, 0.0), (5.0, 0.0)]).value == pytest.approx(4.0, rel=1e-9)


def test_tube_mass_volumes():
    g = box_grid(20, 2, 0.25)
    T = Tube((1.0, -2.0), (0.6, 0.8), 3.0, 16.0)
    assert tube_mass(Weight(g, np.ones(g.shape)), T) == pytest.approx(6.0 * 16.0, rel=0.05)
    wb = make_ball_union_weight([(1.5, -1.0)], 1.0, grid=g)
    assert tube_mass(wb, T) == pytest.approx(math.pi, rel=0.05)
    g3 = box_grid(8, 3, 0.25)
    T3 = Tube((0.0, 0.0, 0.0), (0.0, 0.6, 0.8), 2.0, 10.0)
    assert tube_mass(Weight(g3, np.ones(g3.shape)), T3) == pytest.approx(math.pi * 4 * 10, rel=0.05)


def test_single_piece_value():
    R, rho = 16, 4.0
    patch = paraboloid(2)
    E = [Cap((0.0,), 0.1)]
    net = tube_net(E, patch, R)
    # vertical tube through the origin: its near end is y = -8, first piece is [-8, -4] x [-4, -2]
    # cell-centred grid so that cells tile the piece exactly
    g = Grid((-R + 0.125,) * 2, 0.25, (128, 128))
    X, Y = g.mesh()
    w = Weight(g, ((X > -4) & (X < -2) & (Y > -8) & (Y < -4)).astype(float))
    assert w.total() == pytest.approx(rho**1.5)
    res = a_functional(w, rho, R, E, patch, net)
    assert res.value == pytest.approx(rho**1.5 / rho**0.5, rel=0.1)


def test_comparison_bound_random_weights():
    patch = paraboloid(2)
    E = [Cap((0.2,), 0.2)]
    g = box_grid(16, 2)
    net = tube_net(E, patch, 16)
    rng = np.random.default_rng(11)
    for _ in range(20):
        w = Weight(g, rng.random(g.shape) ** 3 * (rng.random(g.shape) < 0.5))
        res = a_functional(w, 4.0, 16, E, patch, net)
        assert res.value <= res.piece_density_sup ** (1 / 3) * res.tube_mass_sup ** (2 / 3) * (1 + 1e-12)


@pytest.mark.parametrize("lam", [4, 16])
def test_coarser_tessellation_bounded_by_finer(lam):
    rng = np.random.default_rng(lam)
    g = box_grid(40, 2)
    w = Weight(g, rng.random(g.shape) * (rng.random(g.shape) < 0.3))
    for ang in (0.0, 0.3, 1.1):
        T = Tube((1.0, 2.0), (math.sin(ang), math.cos(ang)), 8.0, 64.0)
        assert tessellation_sum(w, T, 4.0 * lam) <= 4 * tessellation_sum(w, T, 4.0)


def test_slab_parallelism_and_star_weight():
    shallow = paraboloid(2, a=0.005)
    flat = Slab((0.0, 0.0), (0.0, 1.0), 8.0)
    assert slab_parallelism(flat, shallow) >= math.pi / 2 - 0.01
    upright = Slab((0.0, 0.0), (1.0, 0.0), 8.0)
    assert slab_parallelism(upright, paraboloid(2)) == pytest.approx(0.0, abs=1e-9)
    g = Grid((-40 + 0.125,) * 2, 0.25, (320, 320))
    s = Slab((0.0, 0.0), (0.0, 1.0), 8.0)
    w = make_slab_weight([s], g)
    ws = star_weight([s], g)
    # dilation by 3 scales every axis, so the area grows by 3^2
    assert ws.total() == pytest.approx(9 * w.total(), rel=0.1)
