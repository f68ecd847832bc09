import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import curve_fit

from fodshift.geometry import DirectionSet, angle_between
from fodshift.metrics import (ArctanFit, ArctanFitError, MetricsReport, PeakSet, afd, afd_error,
                              agreement_rate, angular_error, evaluate, extract_peaks,
                              extract_peaks_volume, fit_arctan, match_peaks, mean_wm_fa,
                              reports_to_csv, reports_to_markdown, tensor_fit, wm_mask)
from fodshift.metrics import tensor_eigenvalues
from fodshift.phantom import (FiberCompartment, VoxelModel, build_cohort, get_preset, gt_fod,
                              simulate_signal)

from conftest import unit_vectors


def fod_of(dirs, fracs):
    return gt_fod(VoxelModel(tuple(FiberCompartment(d, f, 1.7e-3, 0.3e-3)
                                   for d, f in zip(dirs, fracs)), 1.0 - sum(fracs)))


# --- peaks --------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 3])
def test_peak_count_of_ground_truth(k):
    dirs = np.eye(3)[:k]
    p = extract_peaks(fod_of(dirs, [0.9 / k] * k))
    assert len(p) == k
    for d in dirs:
        assert min(angle_between(d, q) for q in p.directions) < 1.0
    # strongest first, upper hemisphere
    assert np.all(np.diff(p.amplitudes) <= 1e-12)
    assert np.all(p.directions[:, 2] >= -1e-12)


def test_refinement_beats_grid_resolution():
    u = np.array([0.123, 0.456, 0.88])
    u /= np.linalg.norm(u)
    p = extract_peaks(fod_of([u], [0.9]))
    assert angle_between(p.directions[0], u) < 0.5      # grid spacing is ~4 degrees


def test_threshold_and_separation():
    u = np.array([0, 0, 1.0])
    assert len(extract_peaks(fod_of([u], [0.9]), abs_threshold=10.0)) == 0
    assert len(extract_peaks(np.zeros(45))) == 0
    # two fibres 10 degrees apart merge below the separation gate
    w = np.array([math.sin(math.radians(10)), 0, math.cos(math.radians(10))])
    assert len(extract_peaks(fod_of([u, w], [0.45, 0.45]))) == 1


def test_volume_peaks_consistent_with_single():
    rng = np.random.default_rng(0)
    fods = np.stack([fod_of(unit_vectors(2, s), [0.45, 0.45]) for s in range(4)]).reshape(2, 2, 1, 45)
    vp = extract_peaks_volume(fods)
    for idx in np.ndindex(2, 2, 1):
        one = extract_peaks(fods[idx])
        assert vp.count[idx] == len(one)
        np.testing.assert_allclose(vp.at(idx).directions, one.directions, atol=1e-12)
    mask = np.zeros((2, 2, 1), bool)
    mask[0, 0, 0] = True
    assert extract_peaks_volume(fods, mask=mask).count[1, 1, 0] == 0
    del rng


# --- matching -----------------------------------------------------------

def brute_force_match(P, G, gate):
    best = None
    k = min(len(P), len(G))
    for pi in itertools.permutations(range(len(P)), k):
        for gi in itertools.combinations(range(len(G)), k):
            cost = sum(angle_between(P[a], G[b]) for a, b in zip(pi, gi))
            if best is None or cost < best[0] - 1e-9:
                best = (cost, list(zip(pi, gi)))
    return sorted((a, b) for a, b in best[1] if angle_between(P[a], G[b]) <= gate)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_matching_equals_brute_force(seed, n_pred, n_gt):
    P = unit_vectors(n_pred, seed)
    G = unit_vectors(n_gt, seed + 99_999)
    got = match_peaks(PeakSet(P, np.ones(n_pred)), PeakSet(G, np.ones(n_gt)), 45.0)
    assert sorted((i, j) for i, j, _ in got) == brute_force_match(P, G, 45.0)


def test_matching_is_sign_invariant_and_empty_safe():
    P = PeakSet(np.array([[0, 0, 1.0]]), np.ones(1))
    G = PeakSet(np.array([[0, 0, -1.0]]), np.ones(1))
    assert match_peaks(P, G)[0][2] == pytest.approx(0.0)
    assert match_peaks(P, PeakSet(np.zeros((0, 3)), np.zeros(0))) == []


# --- volume metrics -----------------------------------------------------

def test_perfect_prediction_scores():
    s = build_cohort("dhcp", 1, grid_dims=(6, 6, 6), rng_seed=1)[0]
    m = s.fiber_class > 0
    rep = evaluate(s.gt_fod, s.gt_fod, m)
    present = [k for k in (1, 2, 3) if np.any(s.fiber_class == k)]
    assert len(present) >= 2
    for k in present:
        assert rep.classes[k]["AR"] == 100.0
        assert rep.classes[k]["AE"] == pytest.approx(0.0, abs=1e-6)
        assert rep.classes[k]["dAFD"] == 0.0
        assert rep.classes[k]["n_voxels"] == int(np.sum(s.fiber_class == k))
    assert agreement_rate(s.gt_fod, s.gt_fod, m, 1) == 100.0
    assert math.isnan(agreement_rate(s.gt_fod, s.gt_fod, np.zeros_like(m), 1))


def test_ar_conditions_on_reference_count():
    single = fod_of([[0, 0, 1.0]], [0.9])
    cross = fod_of([[0, 0, 1.0], [1.0, 0, 0]], [0.45, 0.45])
    gt = np.stack([single, single, cross, cross]).reshape(4, 1, 1, 45)
    pred = np.stack([single, cross, cross, single]).reshape(4, 1, 1, 45)
    m = np.ones((4, 1, 1), bool)
    assert agreement_rate(pred, gt, m, 1) == 50.0
    assert agreement_rate(pred, gt, m, 2) == 50.0
    # AE: the split 2F voxel matches one peak exactly
    assert angular_error(pred, gt, m, 2) == pytest.approx(0.0, abs=0.1)


def test_afd_is_integral():
    c = fod_of([[0, 0, 1.0]], [0.7])
    assert afd(c) == pytest.approx(0.7)
    a = np.zeros((2, 1, 1, 45))
    b = np.zeros((2, 1, 1, 45))
    b[..., 0] = 0.1 / (2 * math.sqrt(math.pi))
    assert afd_error(a, b, np.ones((2, 1, 1), bool)) == pytest.approx(0.1)


# --- tensor scalars -----------------------------------------------------

def test_tensor_fit_recovers_known_tensor():
    dirs = DirectionSet(np.vstack([[0, 0, 0], unit_vectors(30)]), np.r_[0, np.full(30, 1000.0)])
    u = np.array([0.2, 0.3, 0.93])
    s = simulate_signal(VoxelModel((FiberCompartment(u, 1.0, 1.7e-3, 0.2e-3),)), dirs)
    for weighted in (True, False):
        fa, md = tensor_fit(s, dirs, weighted)
        assert fa == pytest.approx(0.8704, abs=1e-3)
        assert md == pytest.approx(0.7e-3, rel=1e-9)
    ev = tensor_eigenvalues(s, dirs)
    np.testing.assert_allclose(ev, [1.7e-3, 0.2e-3, 0.2e-3], rtol=1e-9)


def test_tensor_invalid_voxels_nan():
    dirs = DirectionSet(np.vstack([[0, 0, 0], unit_vectors(10)]), np.r_[0, np.full(10, 1000.0)])
    s = np.ones((2, 11))
    s[1, 3] = 0.0
    ev = tensor_eigenvalues(s, dirs)
    assert np.all(np.isfinite(ev[0])) and np.all(np.isnan(ev[1]))
    with pytest.raises(ValueError):
        tensor_eigenvalues(np.ones(4), DirectionSet(unit_vectors(4), 1000.0))


def test_wm_mask_excludes_isotropic_regions(small_dhcp):
    # dHCP-like SNR 30: isotropic blocks stay out, fibre voxels stay in
    for s in small_dhcp:
        m = wm_mask(s)
        assert np.all(m[s.fiber_class > 0])
        assert np.mean(m[s.fiber_class == 0]) < 0.05
        assert 0.1 < mean_wm_fa(s) < 0.8


def test_wm_mask_bcp_rule_includes_fibres(small_bcp):
    for s in small_bcp:
        assert np.all(wm_mask(s)[s.fiber_class > 0])


def test_noiseless_bcp_mask_excludes_iso():
    s = build_cohort("bcp", 1, grid_dims=(6, 6, 6), noise=False)[0]
    m = wm_mask(s)
    assert not np.any(m[s.fiber_class == 0])


# --- arctan fit ---------------------------------------------------------

def test_arctan_fit_matches_scipy():
    rng = np.random.default_rng(3)
    t = np.linspace(-3, 6, 40)
    y = 0.36 + 0.095 * np.arctan(0.9 * (t + 1.0)) + rng.normal(0, 0.005, t.size)
    fit = fit_arctan(t, y)
    ref, _ = curve_fit(lambda t, a, b, c, t0: a + b * np.arctan(c * (t - t0)), t, y,
                       p0=[np.mean(y), 0.1, 1.0, 0.0], maxfev=20_000)
    np.testing.assert_allclose(fit.params, ref, rtol=1e-4, atol=1e-6)
    assert fit.converged
    assert fit.slope(0.0) == pytest.approx(ref[1] * ref[2] / (1 + (ref[2] * (0 - ref[3])) ** 2),
                                           rel=1e-4)


def test_arctan_exact_data_and_errors():
    truth = ArctanFit(0.3, 0.1, 2.0, 0.5)
    t = np.linspace(-2, 3, 12)
    fit = fit_arctan(t, truth(t))
    assert fit.rms < 1e-10
    with pytest.raises(ValueError):
        fit_arctan(t[:3], truth(t[:3]))
    with pytest.raises(ArctanFitError) as err:
        fit_arctan(t, truth(t) + np.sin(7 * t) * 0.01, max_iter=1)
    assert err.value.best.iterations == 1


# --- reports ------------------------------------------------------------

def test_csv_and_markdown_layout():
    r = MetricsReport("dHCP-like", "intra", "DL", 0,
                      {1: {"AR": 87.025, "AE": 5.0, "dAFD": 0.1234, "n_voxels": 10},
                       2: {"AR": float("nan"), "AE": float("nan"), "dAFD": float("nan"),
                           "n_voxels": 0}})
    text = reports_to_csv([r])
    lines = text.strip().split("\n")
    assert lines[0] == "site,experiment,method,n_target_subjects,class,AR,AE,dAFD,n_voxels"
    assert lines[1] == "dHCP-like,intra,DL,0,1F,87.03,5.00,0.12,10"
    assert lines[2].endswith("nan,nan,nan,0")
    assert reports_to_csv([]).count("\n") == 1
    md = reports_to_markdown([r], "t")
    assert "| 1F AR (%) | 1F AE (deg) | 1F dAFD | 2F AR (%)" in md
    assert "| 87.03 | 5.00 | 0.12 |" in md
