import csv
import json
import math

import numpy as np
import pytest

from mtlab.errors import FitError, GeometryError
from mtlab.extension import Density, bump_density, extend_fast_grid, random_smooth_density
from mtlab.geometry import Cap, Tube, paraboloid, shallow_paraboloid
from mtlab.grids import Weight, box_grid
from mtlab.inequality_lab import (
    MTReport,
    ball_tube_meets,
    fit_exponent,
    flake_mt_check,
    mt_report,
    refined_decoupling_check,
    richness_partition,
    slab_decoupling_check,
    sweep,
    write_reports,
)
from mtlab.scenarios import focusing_pair, random_slabs
from mtlab.tomography import Flake, Slab
from mtlab.wavepacket import decompose

R = 32


@pytest.fixture(scope="module")
def pair():
    p = paraboloid(2)
    g = random_smooth_density(p, R, np.random.default_rng(2), n_bumps=3)
    grid = box_grid(R, 2)
    rng = np.random.default_rng(4)
    w = Weight(grid, rng.random(grid.shape) * (rng.random(grid.shape) < 0.05))
    return g, w


def test_report_ratios_and_scaling(pair):
    g, w = pair
    base = mt_report(g, w, R, rho=2.0)
    for k, v in base.rhs_variants.items():
        assert base.ratios[k] == pytest.approx(base.lhs / v)
    assert base.rhs_variants["xray_perp"] <= base.rhs_variants["xray"] * (1 + 1e-12)
    big = mt_report(g * 3.0, w.scaled(5.0), R, rho=2.0)
    assert big.lhs == pytest.approx(45 * base.lhs, rel=1e-9)
    for k in base.ratios:
        assert big.ratios[k] == pytest.approx(base.ratios[k], rel=1e-6)


def test_zero_density_report(pair):
    _, w = pair
    rep = mt_report(Density.zeros(paraboloid(2), R), w, R)
    assert rep.lhs == 0 and all(v == 0 for v in rep.ratios.values())


def test_dimension_mismatch(pair):
    g, _ = pair
    with pytest.raises(GeometryError):
        mt_report(g, Weight(box_grid(4, 3), np.ones((9, 9, 9))), R)


def test_report_rejects_bad_ratio():
    with pytest.raises(ValueError):
        MTReport.build(float("nan"), {"x": 1.0}, R, 1, 2, 1.0)


def test_ball_weight_bound():
    p = paraboloid(2)
    g = random_smooth_density(p, 64, np.random.default_rng(0))
    grid = box_grid(64, 2)
    w = Weight(grid, grid.ball_mask(64).astype(float))
    rep = mt_report(g, w, 64, variants=("xray",))
    assert rep.lhs <= 5 * 64 * g.norm2()


def test_focusing_pair_ratio():
    p = paraboloid(2)
    ratios = []
    for RR in (64, 128):
        g, w, cap = focusing_pair(RR, p)
        rep = mt_report(g, w, RR, E=[cap], variants=("tube_power",))
        ratios.append(rep.ratios["tube_power"])
    assert all(0.05 <= r <= 1 for r in ratios)
    assert ratios[1] / ratios[0] == pytest.approx(1.0, abs=0.1)


def test_stein_variant_present(pair):
    g, w = pair
    rep = mt_report(g, w, R, variants=("xray",), stein=True)
    assert rep.rhs_variants["stein"] > 0


def test_ball_tube_meets_distance():
    T = Tube((0.0, 0.0), (1.0, 0.0), 2.0, 10.0)
    C = np.array([[0.0, 2.9], [0.0, 3.1], [5.9, 0.0], [6.1, 0.0], [5.7, 2.7]])
    assert ball_tube_meets(C, 1.0, T).tolist() == [True, False, True, False, True]


def test_richness_single_and_parallel_tubes():
    RR = 64
    T = Tube((0.0, 0.0), (0.0, 1.0), 8.0, RR)
    part = richness_partition([T], RR)
    assert set(part.counts[part.counts > 0]) == {1}
    tubes = [Tube((x, 0.0), (0.0, 1.0), 1.0, RR) for x in (-40.0, 0.0, 40.0)]
    part = richness_partition(tubes, RR)
    assert set(part.counts[part.counts > 0]) == {1}
    assert part.incidences_ballwise == part.incidences_tubewise
    touched = int(np.sum(part.counts > 0))
    assert 0.5 * 3 * RR**0.5 <= touched <= 2 * 3 * RR**0.5


def test_richness_identity_random_packets():
    p = paraboloid(2)
    g = random_smooth_density(p, 64, np.random.default_rng(9))
    ps = decompose(g, 64)
    part = richness_partition(ps.tubes(ps.indices()), 64)
    assert part.incidences_ballwise == part.incidences_tubewise
    for j, balls in part.levels.items():
        assert np.all((part.counts[balls] >= 2**j) & (part.counts[balls] < 2 ** (j + 1)))


def test_refined_decoupling_single_packet():
    p = paraboloid(2)
    g = random_smooth_density(p, 64, np.random.default_rng(1))
    ps = decompose(g, 64)
    best = max(ps.indices(), key=lambda i: ps[i].norm2)
    res = refined_decoupling_check(g, 64, pset=ps, indices=[best])
    assert res.n_tubes == 1 and set(res.ratios) == {1}
    assert math.isfinite(res.ratios[1]) and res.ratios[1] > 0
    full = refined_decoupling_check(g, 64, pset=ps)
    assert full.p == 6 and all(math.isfinite(v) for v in full.ratios.values())


def test_slab_single_cap_is_dominated():
    p = shallow_paraboloid(2)
    rho = 16.0
    g = bump_density(p, Cap((0.0,), 0.4 * rho**-0.25), R)
    slabs = random_slabs(np.random.default_rng(0), R, rho, 10)
    res = slab_decoupling_check(g, slabs, R, rho)
    assert res.n_caps == 1
    assert res.ratio <= 1 + 1e-6


def test_slab_overlap_and_scale_errors():
    p = shallow_paraboloid(2)
    g = random_smooth_density(p, R, np.random.default_rng(0))
    s = Slab((0.0, 0.0), (0.0, 1.0), 4.0)
    with pytest.raises(GeometryError):
        slab_decoupling_check(g, [s, s], R, 16.0)
    with pytest.raises(ValueError):
        slab_decoupling_check(g, [s], R, 16.0, cap_scale="third")


def test_horizontal_slab_plancherel_case():
    p = paraboloid(2)
    g = random_smooth_density(p, 64, np.random.default_rng(3))
    rep = flake_mt_check(g, [Flake((0.0,), 64.0, halfwidth=0.5)], 64)
    # the unit slab through 0 holds the single slice t = 0, where |Eg|^2 integrates to ||g||^2
    assert rep.lhs / g.norm2() == pytest.approx(1.0, rel=0.1)
    assert rep.ratios["packet"] <= 3


def test_flake_zero_and_steep():
    p = paraboloid(2)
    rep = flake_mt_check(Density.zeros(p, R), [Flake((0.0,), 8.0)], R)
    assert rep.lhs == 0 and all(v == 0 for v in rep.ratios.values())
    g = random_smooth_density(p, R, np.random.default_rng(0))
    with pytest.raises(GeometryError):
        flake_mt_check(g, [Flake((0.0,), 8.0, slope=(100.0,))], R)


def test_fit_exponent_power_laws():
    Rs = [64, 128, 256, 512]
    assert fit_exponent(Rs, [2.0] * 4).slope == pytest.approx(0.0, abs=1e-9)
    assert fit_exponent(Rs, Rs).slope == pytest.approx(1.0, abs=1e-9)
    fit = fit_exponent(Rs, [3 * r**0.25 for r in Rs])
    assert fit.slope == pytest.approx(0.25, abs=1e-12)
    assert math.exp(fit.intercept) == pytest.approx(3.0, rel=1e-12)
    with pytest.raises(FitError):
        fit_exponent([64, 128], [1, 2])
    with pytest.raises(FitError):
        fit_exponent([64, 128, 256], [1, 0, 2])


def test_sweep_and_reports(tmp_path):
    def gen(RR):
        return MTReport.build(float(RR), {"a": 1.0, "b": 0.0}, RR, 1, 2, 1.0)

    sink = []
    reports, fits = sweep([4, 8, 16], gen, sink)
    assert len(sink) == 3 and set(fits) == {"a"}
    assert fits["a"].slope == pytest.approx(1.0)
    with pytest.raises(FitError):
        sweep([4, 8], gen)
    write_reports(reports, tmp_path / "r.csv", tmp_path / "r.json", scenario="demo")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert list(rows[0]) == ["scenario", "n", "R", "rho", "lhs", "rhs_a", "rhs_b", "ratio_a", "ratio_b"]
    assert float(rows[2]["lhs"]) == 16.0
    assert json.load(open(tmp_path / "r.json"))[0]["R"] == 4.0
