import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from mtlab.errors import BudgetError, GeometryError, ResolutionError
from mtlab.extension import (
    Density,
    ExtensionOperator,
    QuadratureSpec,
    bump_density,
    cap_indicator_density,
    extend_direct,
    extend_fast_grid,
    point_mass_density,
    random_smooth_density,
    weighted_l2,
)
from mtlab.geometry import Cap, paraboloid
from mtlab.grids import Weight, box_grid


def gaussian_density(patch, R, s=0.06):
    return Density.from_function(patch, lambda w: np.exp(-np.sum(w * w, axis=-1) / (2 * s * s)), R)


def gaussian_extension(x, t, s=0.06, a=0.5):
    """Closed form of int exp(2 pi i (x w + t a w^2)) exp(-w^2 / 2 s^2) dw over the line."""
    A = 1 / (2 * s * s) - 2j * np.pi * a * t
    return np.sqrt(np.pi / A) * np.exp(-np.pi**2 * x**2 / A)


def test_fast_matches_direct_n2(patch2, rng):
    g = random_smooth_density(patch2, 16, rng)
    F = extend_fast_grid(g, 16)
    D = extend_direct(g, F.grid.points()).reshape(F.grid.shape)
    assert np.max(np.abs(F.samples - D)) <= 1e-9


def test_fast_matches_direct_n3(patch3, rng):
    g = random_smooth_density(patch3, 6, rng, n_bumps=3)
    F = extend_fast_grid(g, 6)
    D = extend_direct(g, F.grid.points()).reshape(F.grid.shape)
    assert np.max(np.abs(F.samples - D)) <= 1e-9


def test_fast_matches_direct_fine_spacing(patch2, rng):
    g = random_smooth_density(patch2, 8, rng)
    F = extend_fast_grid(g, 8, spacing=0.5)
    D = extend_direct(g, F.grid.points()).reshape(F.grid.shape)
    assert np.max(np.abs(F.samples - D)) <= 1e-9


def test_gaussian_closed_form(patch2):
    R = 32
    g = gaussian_density(patch2, R)
    F = extend_fast_grid(g, R)
    X, T = F.grid.mesh()
    exact = gaussian_extension(X, T)
    assert np.max(np.abs(F.samples - exact)) <= 1e-9


def test_refined_quadrature_uses_exact_function(patch2):
    g = gaussian_density(patch2, 16)
    pts = np.array([[3.0, 5.0], [-7.0, 11.0]])
    exact = gaussian_extension(pts[:, 0], pts[:, 1])
    for q in (QuadratureSpec(), QuadratureSpec(refinement=3), QuadratureSpec(rule="trapezoid")):
        assert np.max(np.abs(extend_direct(g, pts, q) - exact)) <= 1e-9


def test_point_mass_has_constant_modulus(patch2):
    g = point_mass_density(patch2, (0.2,), 16)
    F = extend_fast_grid(g, 16)
    np.testing.assert_allclose(np.abs(F.samples), g.cell_volume, rtol=1e-12)


def test_cap_indicator_at_origin_is_cap_length(patch2):
    cap = Cap((0.1,), 0.05)
    g = cap_indicator_density(patch2, cap, 64)
    val = extend_direct(g, np.zeros((1, 2)))[0]
    assert abs(val - 0.1) <= g.spacing


@pytest.mark.parametrize("R", [32, 128])
def test_plancherel_on_slices(patch2, rng, R):
    for _ in range(3):
        g = random_smooth_density(patch2, R, rng)
        F = extend_fast_grid(g, R)
        e = np.sum(np.abs(F.samples) ** 2, axis=0)
        np.testing.assert_allclose(e, g.norm2(), rtol=1e-6)


def test_plancherel_on_slices_n3(patch3, rng):
    g = random_smooth_density(patch3, 16, rng, n_bumps=4, width=0.1, reach=1.0)
    F = extend_fast_grid(g, 16)
    e = np.sum(np.abs(F.samples) ** 2, axis=(0, 1))
    np.testing.assert_allclose(e, g.norm2(), rtol=1e-6)


@given(st.integers(-5, 5), st.integers(-5, 5))
def test_modulation_translates(y1, y2):
    patch = paraboloid(2)
    g = random_smooth_density(patch, 16, np.random.default_rng(7))
    pts = np.array([[1.0, 2.0], [-3.0, 0.0], [4.0, -6.0]])
    lhs = extend_direct(g.modulate(np.array([y1, y2])), pts)
    rhs = extend_direct(g, pts + np.array([y1, y2]))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
       st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False))
def test_linearity(a, b):
    patch = paraboloid(2)
    r = np.random.default_rng(3)
    g1 = random_smooth_density(patch, 8, r)
    g2 = random_smooth_density(patch, 8, r)
    F = extend_fast_grid(a * g1 + b * g2, 8).samples
    G = a * extend_fast_grid(g1, 8).samples + b * extend_fast_grid(g2, 8).samples
    np.testing.assert_allclose(F, G, atol=1e-10 * (1 + abs(a) + abs(b)))


def test_weighted_l2_unit_weight_is_ball_sum(patch2, rng):
    g = random_smooth_density(patch2, 16, rng)
    F = extend_fast_grid(g, 16)
    w = Weight(F.grid, np.ones(F.grid.shape))
    mask = F.grid.ball_mask(16)
    assert weighted_l2(F, w, 16) == pytest.approx(float(np.sum(np.abs(F.samples[mask]) ** 2)))
    with pytest.raises(GeometryError):
        weighted_l2(F, Weight(box_grid(8, 2), np.ones((17, 17))))


def test_errors(patch2, rng):
    g = random_smooth_density(patch2, 16, rng)
    with pytest.raises(ResolutionError):
        extend_fast_grid(g, 32)
    with pytest.raises(ResolutionError):
        extend_direct(g, np.array([[40.0, 0.0]]))
    with pytest.raises(BudgetError):
        extend_fast_grid(g, 16, memory_budget=1000)
    with pytest.raises(ResolutionError):
        Density(patch2, 4, np.zeros(4), 16)
    with pytest.raises(ValueError):
        extend_fast_grid(g, 16, spacing=0.3)


def test_density_algebra_checks_grid(patch2, rng):
    a = random_smooth_density(patch2, 16, rng)
    b = random_smooth_density(patch2, 32, rng)
    with pytest.raises(GeometryError):
        a + b


def test_bump_density_centre_moves_with_v(patch2):
    g = bump_density(patch2, Cap((0.0,), 0.2), 64, v=(20.0,))
    F = extend_fast_grid(g, 64)
    j = (F.grid.shape[1] - 1) // 2
    row = np.abs(F.samples[:, j])
    assert F.grid.axes()[0][np.argmax(row)] == pytest.approx(20.0)


def test_estimator_api(patch2, rng):
    op = ExtensionOperator(R=8)
    assert clone(op).get_params()["R"] == 8
    g = random_smooth_density(patch2, 8, rng)
    F = op.fit().transform(g)
    assert F.grid.shape == (17, 17)
    Fs = op.transform([g, g])
    assert len(Fs) == 2
    pts = F.grid.points()[:5]
    np.testing.assert_allclose(op.evaluate(g, pts), F.samples.ravel()[:5], atol=1e-12)
