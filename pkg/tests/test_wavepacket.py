import numpy as np
import pytest
from sklearn.base import clone

from mtlab.bumps import bump, plateau
from mtlab.errors import ResolutionError, ScaleError
from mtlab.extension import Density, bump_density, point_mass_density, random_smooth_density
from mtlab.geometry import Cap, cap_cover, paraboloid
from mtlab.wavepacket import (
    PacketIndex,
    WavePacketDecomposer,
    check_decay,
    check_orthogonality,
    check_reconstruction,
    decompose,
    essential_support,
    local_constancy_check,
    tube_of,
)


@pytest.fixture(scope="module")
def random_pset():
    p = paraboloid(2)
    g = random_smooth_density(p, 64, np.random.default_rng(5))
    return g, decompose(g, 64)


def v0_mass_oracle(g, R, delta, psi_support=0.6, eta_support=0.7, inner=0.85, outer=1.5):
    """Mass of the v = 0 packets by dense convolution on the full frequency grid (n = 2).

    ``eta_0`` is the bump at 0 normalised by its translates on ``L Z``; its
    Fourier coefficients come from a fine trapezoid rule.
    """
    rho = R**-0.5
    L = R ** ((1 + delta) / 2)
    w = g.omega()[:, 0]
    C = np.array([c.center[0] for c in cap_cover(g.patch, rho)])
    raw = bump(np.abs(w[:, None] - C[None, :]) / (psi_support * rho))
    tot = raw.sum(axis=1, keepdims=True)
    psi = np.where(tot > 0, raw / np.where(tot > 0, tot, 1), 0.0)
    x = np.linspace(-eta_support * L, eta_support * L, 20001)
    js = np.arange(-3, 4)
    eta0 = bump(np.abs(x) / (eta_support * L)) / bump(np.abs(x[:, None] - js * L) / (eta_support * L)).sum(axis=1)
    M = len(w)
    m = np.arange(-(M - 1), M)
    ehat = np.trapezoid(eta0[None, :] * np.cos(2 * np.pi * np.outer(m, x) / g.N), x, axis=1) / g.N
    mass = 0.0
    for t, c in enumerate(C):
        f = psi[:, t] * g.samples
        if not np.any(f):
            continue
        conv = np.convolve(f, ehat)[M - 1 : 2 * M - 1]
        tilde = plateau(np.abs(w - c) / rho, inner, outer) * g.mask
        mass += float(np.sum(np.abs(conv * tilde) ** 2) * g.cell_volume)
    return mass


def test_zero_density_gives_empty_set():
    p = paraboloid(2)
    assert len(decompose(Density.zeros(p, 64), 64)) == 0


def test_reconstruction_and_budget(random_pset):
    g, ps = random_pset
    assert check_reconstruction(g, ps) <= 1e-2
    assert ps.total_norm2() <= 4 * g.norm2()
    rec = WavePacketDecomposer(R=64).fit(g).inverse_transform(ps)
    np.testing.assert_allclose(rec.samples, ps.density().samples)


def test_packets_vanish_outside_tapered_cap(random_pset):
    g, ps = random_pset
    rho = 64**-0.5
    for idx in ps.indices()[::7]:
        d = ps.density([idx])
        w = d.omega()[..., 0]
        outside = np.abs(w - idx.cap.center[0]) > 1.5 * rho * (1 + 1e-9)
        assert not np.any(d.samples[outside])


def test_single_packet_orthogonality_is_one(random_pset):
    _, ps = random_pset
    idx = ps.indices()[3]
    assert check_orthogonality(ps, [idx]) == pytest.approx(1.0, abs=1e-12)
    assert check_orthogonality(ps, []) == 1.0


def test_random_subsets_nearly_orthogonal(random_pset):
    _, ps = random_pset
    rng = np.random.default_rng(0)
    idx = ps.indices()
    for _ in range(20):
        sub = [idx[i] for i in rng.choice(len(idx), size=rng.integers(1, len(idx)), replace=False)]
        assert 0.25 <= check_orthogonality(ps, sub) <= 4


def test_decay_and_essential_support(random_pset):
    _, ps = random_pset
    norms = ps.norms()
    big = sorted(norms, key=norms.get)[-3:]
    for idx in big:
        assert check_decay(ps, idx) <= 0.05
        assert essential_support(ps, idx) >= 0.95


def test_v0_concentration_matches_oracle():
    R, delta = 256, 0.1
    p = paraboloid(2)
    dec = WavePacketDecomposer(R=R, delta=delta)
    g0 = Density.zeros(p, R)
    dec.fit(g0)
    theta0 = min(range(len(dec.caps_)), key=lambda t: abs(dec.caps_[t].center[0]))
    g = dec.psi_bump(theta0)
    ps = dec.transform(g)
    v0 = sum(pk.norm2 for i, pk in ps.packets.items() if all(abs(c) < 1e-9 for c in i.v))
    oracle = v0_mass_oracle(g, R, delta)
    assert v0 == pytest.approx(oracle, rel=2e-3)
    assert v0 / g.norm2() >= 0.8


def test_modulated_bump_dominant_index():
    R = 64
    p = paraboloid(2)
    dec = WavePacketDecomposer(R=R).fit(Density.zeros(p, R))
    cap = dec.caps_[len(dec.caps_) // 2 + 2]
    v0 = float(dec.v1d_[np.argmin(np.abs(dec.v1d_ - 30.0))])
    g = bump_density(p, Cap(cap.center, 0.5 * R**-0.5), R, v=(v0,))
    ps = dec.transform(g)
    best = max(ps.packets.items(), key=lambda kv: kv[1].norm2)[0]
    assert best.cap == cap
    assert best.v == (v0,)


def test_single_cap_support_reconstructs_from_its_packets():
    R = 64
    p = paraboloid(2)
    dec = WavePacketDecomposer(R=R).fit(Density.zeros(p, R))
    cap = dec.caps_[5]
    g = bump_density(p, Cap(cap.center, 0.35 * R**-0.5), R)
    ps = dec.transform(g)
    assert {i.cap for i in ps.indices()} == {cap}
    assert check_reconstruction(g, ps) <= 1e-2


def test_tube_of_examples():
    p = paraboloid(2, a=0.5)
    T = tube_of(PacketIndex(Cap((0.0,), 0.1), (0.0,)), p, 64, 0.05)
    np.testing.assert_allclose(T.direction, (0.0, -1.0), atol=1e-12)
    assert T.radius == pytest.approx(64**0.55) and T.length == 128
    T = tube_of(PacketIndex(Cap((0.5,), 0.1), (3.0,)), p, 64, 0.05)
    u = np.array([0.5, -1.0]) / np.hypot(0.5, 1.0)
    np.testing.assert_allclose(T.direction, u, atol=1e-12)
    assert T.contains(np.array([[3.0, 0.0]]))[0]


def test_csv_export(tmp_path, random_pset):
    _, ps = random_pset
    ps.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].split(",") == ["theta0", "v0", "norm", "anchor0", "anchor1", "dir0", "dir1", "radius", "length"]
    assert len(lines) == len(ps) + 1


def test_errors_and_estimator_api():
    p = paraboloid(2)
    g = random_smooth_density(p, 16, np.random.default_rng(0))
    with pytest.raises(ResolutionError):
        decompose(g, 64)
    with pytest.raises(ValueError):
        decompose(g, 16, delta=0.5)
    dec = WavePacketDecomposer(R=16, delta=0.1)
    assert clone(dec).get_params()["delta"] == 0.1
    with pytest.raises(ScaleError):
        local_constancy_check(g, 2, 16, np.random.default_rng(0))


def test_local_constancy():
    p = paraboloid(2)
    rng = np.random.default_rng(0)
    g = point_mass_density(p, (0.1,), 64)
    assert local_constancy_check(g, 16, 64, rng) == pytest.approx(1.0, abs=1e-9)
    R = 256
    g = bump_density(p, Cap((0.1,), R**-0.5), R)
    assert local_constancy_check(g, R, R, rng) <= 20
