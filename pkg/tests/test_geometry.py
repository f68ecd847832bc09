import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import sph_harm_y

from fodshift.geometry import (DirectionSet, IllConditionedError, angle_between,
                               electrostatic_energy, eval_sh, fit_sh, lmax_from_n,
                               make_tessellation, n_coeffs, select_optimal_directions, sh_basis)

from conftest import unit_vectors


def real_sh_reference(lmax, v):
    """Real SH built from scipy's complex harmonics (which carry the CS phase)."""
    th = np.arccos(np.clip(v[:, 2], -1, 1))
    ph = np.arctan2(v[:, 1], v[:, 0])
    cols = []
    for l in range(0, lmax + 1, 2):
        for m in range(-l, l + 1):
            Y = sph_harm_y(l, abs(m), th, ph)
            if m == 0:
                cols.append(Y.real)
            else:
                cols.append(math.sqrt(2) * (-1) ** m * (Y.real if m > 0 else Y.imag))
    return np.stack(cols, axis=1)


def test_coefficient_counts():
    assert [n_coeffs(l) for l in (0, 2, 4, 6, 8)] == [1, 6, 15, 28, 45]
    assert lmax_from_n(45) == 8
    with pytest.raises(ValueError):
        lmax_from_n(7)
    with pytest.raises(ValueError):
        sh_basis(3, unit_vectors(2))


def test_y00_constant():
    B = sh_basis(0, unit_vectors(10))
    np.testing.assert_allclose(B[:, 0], 0.2820948, atol=1e-7)
    assert abs(B[0, 0] - 1 / (2 * math.sqrt(math.pi))) < 1e-15


def test_basis_matches_scipy_harmonics():
    v = unit_vectors(50, 1)
    np.testing.assert_allclose(sh_basis(8, v), real_sh_reference(8, v), atol=1e-12)


def test_basis_is_orthonormal_under_quadrature():
    # Gauss-Legendre in cos(theta) times uniform phi is exact for degree <= 16
    x, w = np.polynomial.legendre.leggauss(12)
    phi = np.arange(24) * 2 * math.pi / 24
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st_ = np.sqrt(1 - ct ** 2)
    v = np.stack([st_ * np.cos(ph), st_ * np.sin(ph), ct], -1).reshape(-1, 3)
    weights = np.repeat(w, 24) * (2 * math.pi / 24)
    B = sh_basis(8, v)
    np.testing.assert_allclose(B.T @ (B * weights[:, None]), np.eye(45), atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_sh_round_trip(seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(45)
    dirs = DirectionSet(make_tessellation(3).points, 1000.0)
    c2 = fit_sh(eval_sh(c, dirs), dirs, 8)
    np.testing.assert_allclose(c2, c, atol=1e-8)


def test_fit_underdetermined_raises():
    dirs = DirectionSet(unit_vectors(20), 1000.0)
    with pytest.raises(IllConditionedError):
        fit_sh(np.ones(20), dirs, 8)
    # damping makes it solvable
    assert fit_sh(np.ones(20), dirs, 8, regularization=1e-3).shape == (45,)


def test_fit_shape_mismatch():
    dirs = DirectionSet(unit_vectors(30), 1000.0)
    with pytest.raises(ValueError):
        fit_sh(np.ones(29), dirs, 4)


@pytest.mark.parametrize("level,count", [(0, 12), (1, 42), (2, 162), (3, 642), (4, 2562)])
def test_tessellation_counts(level, count):
    t = make_tessellation(level)
    assert len(t) == count == 10 * 4 ** level + 2
    np.testing.assert_allclose(np.linalg.norm(t.points, axis=1), 1.0, atol=1e-12)
    # every vertex has 5 or 6 neighbours and adjacency is symmetric
    sizes = {len(n) for n in t.neighbors}
    assert sizes <= {5, 6}
    for i, nb in enumerate(t.neighbors[:50]):
        for j in nb:
            assert i in t.neighbors[j]


def test_tessellation_hemisphere_halves():
    t = make_tessellation(2)
    h = t.hemisphere()
    assert len(h) == len(t) // 2
    pts = t.points[h]
    # no antipodal pair inside the half
    assert np.max(np.abs(pts @ pts.T - np.eye(len(pts))) + np.eye(len(pts)) * -2) < 1 - 1e-9


def test_direction_set_validation():
    with pytest.raises(ValueError):
        DirectionSet([[1.0, 1.0, 0.0]], 1000.0)
    with pytest.raises(ValueError):
        DirectionSet([[0.0, 0.0, 1.0]], -5.0)
    d = DirectionSet([[0.0, 0.0, 0.0], [0, 0, 1]], [0, 1000])   # zero vector fine at b=0
    assert d.shells() == [0.0, 1000.0]


@given(st.integers(0, 10_000))
def test_angle_between_symmetry(seed):
    u, v = unit_vectors(2, seed)
    a = angle_between(u, v)
    assert 0 <= a <= 90 + 1e-9
    assert abs(a - angle_between(v, u)) < 1e-12
    assert abs(a - angle_between(u, -v)) < 1e-12


def test_optimal_six_matches_brute_force():
    cand = DirectionSet(unit_vectors(10, 7), 1000.0)
    B = sh_basis(2, cand.vectors)
    best = None
    for combo in itertools.combinations(range(10), 6):
        c = np.linalg.cond(B[list(combo)])
        key = (c, electrostatic_energy(cand.vectors[list(combo)]))
        if best is None or key[0] < best[0][0] * (1 - 1e-9) or (
                abs(key[0] - best[0][0]) <= 1e-9 * best[0][0] and key[1] < best[0][1]):
            best = (key, combo)
    chosen = select_optimal_directions(cand, 6)
    np.testing.assert_allclose(chosen.vectors, cand.vectors[list(best[1])])


def test_optimal_selection_deterministic_and_conditioned():
    cand = DirectionSet(make_tessellation(2).points[:40], 1000.0)
    a = select_optimal_directions(cand, 6)
    b = select_optimal_directions(cand, 6)
    np.testing.assert_array_equal(a.vectors, b.vectors)
    assert np.linalg.cond(sh_basis(2, a.vectors)) < 3.0


def test_optimal_selection_errors():
    cand = DirectionSet(unit_vectors(5), 1000.0)
    with pytest.raises(ValueError):
        select_optimal_directions(cand, 6)
    flat = np.array([[math.cos(t), math.sin(t), 0.0] for t in np.linspace(0, math.pi, 8, endpoint=False)])
    with pytest.raises(IllConditionedError):
        select_optimal_directions(DirectionSet(flat, 1000.0), 6)
