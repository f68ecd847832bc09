import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fodshift.geometry import DirectionSet, eval_sh, make_tessellation
from fodshift.phantom import (AgeFaModel, FiberCompartment, VoxelModel, add_rician_noise,
                              build_cohort, derive_seed, fa_of_tensor, get_preset, gt_fod,
                              simulate_signal, simulate_volume, solve_lambdas)

from conftest import unit_vectors


def test_fa_known_tensor():
    assert abs(float(fa_of_tensor(1.7e-3, 0.2e-3)) - 0.8704) < 1e-3
    # closed form with eigenvalues (a, b, b)
    a, b = 1.7e-3, 0.2e-3
    md = (a + 2 * b) / 3
    ref = math.sqrt(1.5) * math.sqrt((a - md) ** 2 + 2 * (b - md) ** 2) / math.sqrt(a * a + 2 * b * b)
    assert abs(float(fa_of_tensor(a, b)) - ref) < 1e-12


@given(st.floats(0.0, 0.95), st.floats(0.5e-3, 2e-3))
def test_solve_lambdas_inverts_fa_and_md(fa, md):
    lp, lr = solve_lambdas(fa, md)
    assert lp >= lr > 0
    assert abs(float(fa_of_tensor(lp, lr)) - fa) < 1e-9
    assert abs((lp + 2 * lr) / 3 - md) < 1e-15


def test_single_fiber_signal_closed_form():
    dirs = DirectionSet(unit_vectors(30), 1000.0)
    u = np.array([0.0, 0.0, 1.0])
    vox = VoxelModel((FiberCompartment(u, 1.0, 1.7e-3, 0.2e-3),), 0.0, s0=2.0)
    c2 = dirs.vectors[:, 2] ** 2
    ref = 2.0 * np.exp(-1000 * (0.2e-3 + 1.5e-3 * c2))
    np.testing.assert_allclose(simulate_signal(vox, dirs), ref, rtol=1e-14)


def test_signal_bounded_by_s0_and_b0_equals_s0():
    dirs = DirectionSet(np.vstack([[0, 0, 0], unit_vectors(20)]), np.r_[0, np.full(20, 2000.0)])
    f = [FiberCompartment(v, 0.3, 1.5e-3, 0.4e-3) for v in unit_vectors(3, 5)]
    vox = VoxelModel(tuple(f), 0.1, s0=1000.0)
    s = simulate_signal(vox, dirs)
    assert s[0] == pytest.approx(1000.0)
    assert np.all(s[1:] < 1000.0) and np.all(s > 0)


def test_volume_matches_voxelwise():
    dirs = get_preset("dhcp").protocol.directions()
    fd = np.zeros((2, 3, 3))
    fd[0, :2] = unit_vectors(2, 1)
    fd[1, :3] = unit_vectors(3, 2)
    fr = np.array([[0.45, 0.45, 0.0], [0.3, 0.3, 0.3]])
    iso = np.array([0.1, 0.1])
    vol = simulate_volume(fd, fr, iso, 1.6e-3, 0.5e-3, dirs, s0=1000.0)
    for i, k in enumerate((2, 3)):
        vox = VoxelModel(tuple(FiberCompartment(fd[i, s], fr[i, s], 1.6e-3, 0.5e-3) for s in range(k)),
                         0.1, s0=1000.0)
        np.testing.assert_allclose(vol[i], simulate_signal(vox, dirs), rtol=1e-12)


def test_voxel_model_validation():
    with pytest.raises(ValueError):
        VoxelModel((FiberCompartment([0, 0, 1], 0.5, 1e-3, 0.5e-3),), 0.1)
    with pytest.raises(ValueError):
        FiberCompartment([0, 0, 1], 0.5, 0.2e-3, 1e-3)
    with pytest.raises(ValueError):
        VoxelModel(tuple(FiberCompartment([0, 0, 1], 0.25, 1e-3, 0.5e-3) for _ in range(4)))


def test_rician_noise_floor():
    sigma = 10.0
    z = add_rician_noise(np.zeros(200_000), s0=300.0, snr=30.0, rng_seed=1)
    # Rayleigh mean sigma*sqrt(pi/2); standard error ~ 0.003*sigma
    assert abs(z.mean() - sigma * math.sqrt(math.pi / 2)) < 0.03 * sigma
    big = add_rician_noise(np.full(200_000, 1000.0), s0=300.0, snr=30.0, rng_seed=2)
    assert abs(big.std() - sigma) < 0.1 and abs(big.mean() - 1000.05) < 0.2


def test_rician_noise_seeded_and_infinite_snr():
    x = np.linspace(1, 2, 10)
    a = add_rician_noise(x, 1.0, 20.0, 5)
    np.testing.assert_array_equal(a, add_rician_noise(x, 1.0, 20.0, 5))
    np.testing.assert_array_equal(add_rician_noise(x, 1.0, np.inf, 5), x)
    with pytest.raises(ValueError):
        add_rician_noise(x, 1.0, 0.0, 5)


def test_gt_fod_peaks_and_integral():
    u = unit_vectors(1, 9)[0]
    vox = VoxelModel((FiberCompartment(u, 0.9, 1.7e-3, 0.3e-3),), 0.1)
    c = gt_fod(vox)
    assert 2 * math.sqrt(math.pi) * c[0] == pytest.approx(0.9)
    t = make_tessellation(4)
    vals = eval_sh(c, DirectionSet(t.points, 1.0))
    best = t.points[np.argmax(vals)]
    assert abs(best @ u) > math.cos(math.radians(3))


def test_age_fa_curve_units():
    curve = AgeFaModel(0.36, 0.095, 0.9, -1.0)
    weeks = curve.in_units(1 / 4.345, 40.0)
    for w in (30.0, 38.0, 44.0):
        assert weeks(w) == pytest.approx(curve((w - 40) / 4.345))
    with pytest.raises(ValueError):
        AgeFaModel(0.3, -0.1, 1.0, 0.0)


def test_dhcp_fa_rises_faster_than_bcp():
    d, b = get_preset("dhcp"), get_preset("bcp")
    # mid-range slopes per month
    d_mid = np.mean(d.to_postnatal_months(np.array(d.age_ranges["baseline"])))
    b_mid = np.mean(b.age_ranges["baseline"])
    sd = d.age_fa.slope(d.age_origin + d_mid / d.months_per_unit) / d.months_per_unit
    sb = b.age_fa.slope(b_mid)
    assert sd > 4 * sb


def test_preset_protocols():
    d = get_preset("dHCP-like")
    assert len(d.protocol.directions()) == 20 + 64 + 88 + 148
    assert d.protocol.snr == 30
    assert get_preset("bcp").protocol.snr == 20
    with pytest.raises(KeyError):
        get_preset("hcp")


def test_cohort_reproducible_and_order_free():
    a = build_cohort("dhcp", 3, grid_dims=(6, 6, 6), rng_seed=11)
    b = build_cohort("dhcp", 3, grid_dims=(6, 6, 6), rng_seed=11)
    for x, y in zip(a, b):
        assert x.id == y.id
        np.testing.assert_array_equal(x.dwi, y.dwi)
    c = build_cohort("dhcp", 3, grid_dims=(6, 6, 6), rng_seed=12)
    assert not np.array_equal(a[0].dwi, c[0].dwi)
    # same layout seed means same fibre classes
    np.testing.assert_array_equal(a[0].fiber_class, c[0].fiber_class)


def test_cohort_ages_in_range(small_dhcp):
    lo, hi = get_preset("dhcp").age_ranges["baseline"]
    for s in small_dhcp:
        assert lo <= s.age <= hi
        assert s.dwi.shape == (6, 6, 6, 320)
        assert s.gt_fod.shape == (6, 6, 6, 45)
        assert set(np.unique(s.fiber_class)) <= {0, 1, 2, 3}


def test_derive_seed_stable():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert derive_seed(0, "a", 1) != derive_seed(0, "a", 2)
    assert 0 <= derive_seed("x") < 2 ** 63
