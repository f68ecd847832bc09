import numpy as np
import pytest
from hypothesis import given, strategies as st

from fodshift.estimator import (AdamState, EstimatorModel, TrainConfig, TrainingData,
                                TrainingError, adam_step, backward, featurize, fine_tune, forward,
                                loss_mse, predict_volume, split_voxels, train, training_data)
from fodshift.geometry import fit_sh
from fodshift.harmonize import b0_mean, six_direction_index


def numeric_grad(model, X, Y, train_mode, seed, h=1e-6):
    g = np.empty_like(model.params)
    for i in range(model.n_params):
        old = model.params[i]
        model.params[i] = old + h
        lp = loss_mse(forward(model, X, train_mode, np.random.default_rng(seed)), Y)
        model.params[i] = old - h
        lm = loss_mse(forward(model, X, train_mode, np.random.default_rng(seed)), Y)
        model.params[i] = old
        g[i] = (lp - lm) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(20))
def test_gradient_check_toy_models(seed):
    rng = np.random.default_rng(seed)
    dims = [int(rng.integers(2, 6)), int(rng.integers(3, 7)), int(rng.integers(3, 7)),
            int(rng.integers(1, 4))]
    m = EstimatorModel(dims, dropout=0.2 if seed % 2 else 0.0, seed=seed)
    m.params += rng.normal(0, 0.05, m.n_params)     # nonzero biases
    X = rng.standard_normal((7, dims[0]))
    Y = rng.standard_normal((7, dims[-1]))
    train_mode = bool(seed % 2)
    _, g = backward(m, X, Y, train_mode, np.random.default_rng(seed + 100))
    num = numeric_grad(m, X, Y, train_mode, seed + 100)
    rel = np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)
    assert rel < 1e-4


def test_model_layout_and_views():
    m = EstimatorModel(seed=3)
    assert m.layer_dims == [162, 256, 256, 45]
    assert m.n_params == 162 * 256 + 256 + 256 * 256 + 256 + 256 * 45 + 45
    lim = np.sqrt(6 / (162 + 256))
    assert np.abs(m.weights[0]).max() <= lim
    assert np.all(m.biases[0] == 0.0)
    m.weights[0][0, 0] = 7.0
    assert m.params[0] == 7.0                       # weights are views
    c = m.copy()
    assert c == m and c.params is not m.params
    assert EstimatorModel(seed=3) == EstimatorModel(seed=3)
    with pytest.raises(ValueError):
        EstimatorModel([5], 0.1)
    with pytest.raises(ValueError):
        EstimatorModel(dropout=1.0)


def test_dropout_only_in_train_mode():
    m = EstimatorModel([4, 8, 2], dropout=0.5, seed=0)
    X = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(forward(m, X), forward(m, X))
    a = forward(m, X, True, np.random.default_rng(1))
    assert not np.allclose(a, forward(m, X))
    # inverted dropout keeps the expectation of hidden units
    Xb = np.ones((20000, 4))
    mean_drop = forward(m, Xb, True, np.random.default_rng(2)).mean(0)
    np.testing.assert_allclose(mean_drop, forward(m, Xb[:1])[0], rtol=0.05, atol=0.02)
    with pytest.raises(ValueError):
        forward(m, np.ones((2, 3)))


def test_adam_step_matches_reference():
    m = EstimatorModel([3, 2], dropout=0.0, seed=0)
    cfg = TrainConfig(lr=0.01, weight_decay=0.1)
    st_ = AdamState.zeros_like(m)
    p0 = m.params.copy()
    g = np.linspace(-1, 1, m.n_params)
    adam_step(m, g, st_, cfg)
    mh = (1 - 0.9) * g / (1 - 0.9)
    vh = (1 - 0.999) * g * g / (1 - 0.999)
    ref = (p0 - 0.01 * mh / (np.sqrt(vh) + 1e-8)) * (1 - 0.01 * 0.1)
    np.testing.assert_allclose(m.params, ref, rtol=1e-12)
    assert st_.step == 1


def test_train_config_presets():
    assert TrainConfig.preset("desk").epochs == 200
    assert TrainConfig.preset("paper").epochs == 1000
    ft = TrainConfig.preset("finetune")
    assert (ft.epochs, ft.lr, ft.batch_size) == (100, 5e-6, 10)
    assert TrainConfig.preset("desk", epochs=3).epochs == 3
    with pytest.raises(KeyError):
        TrainConfig.preset("fast")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_featurize_neighbourhood(small_dhcp):
    s = small_dhcp[0]
    F = featurize(s)
    assert F.shape == s.dims + (162,)
    idx = six_direction_index(s.dirs)
    c = fit_sh(s.dwi[..., idx] / b0_mean(s)[..., None], s.dirs.subset(idx), 2)
    # centre block of a 3x3x3 neighbourhood is offset (1,1,1) -> position 13
    np.testing.assert_allclose(F[2, 3, 4, 13 * 6:14 * 6], c[2, 3, 4], atol=1e-12)
    np.testing.assert_allclose(F[2, 3, 4, 0:6], c[1, 2, 3], atol=1e-12)
    # zero padding at the corner
    np.testing.assert_array_equal(F[0, 0, 0, 0:6], 0.0)
    # equivalent ways of naming the six directions
    np.testing.assert_array_equal(featurize(s, s.dirs.subset(idx)), F)
    with pytest.raises(ValueError):
        featurize(s, idx[:5])


def test_training_reduces_loss_and_is_deterministic(small_dhcp):
    data = training_data(small_dhcp[:1], dtype=np.float32)
    val = training_data(small_dhcp[1:], dtype=np.float32)
    cfg = TrainConfig(epochs=4, lr=1e-3, batch_size=32, seed=1)
    m = EstimatorModel(dtype=np.float32, seed=0)
    a, ha = train(m, data, val, cfg)
    b, hb = train(m, data, val, cfg)
    assert a == b and ha == hb
    assert ha["best_val"] < ha["initial_val"]
    assert ha["best_val"] == min([ha["initial_val"]] + ha["val_loss"])
    assert ha["train_subjects"] == [small_dhcp[0].id]
    assert m == EstimatorModel(dtype=np.float32, seed=0)     # input untouched


def test_best_epoch_zero_returns_initial(small_dhcp):
    data = training_data(small_dhcp[:1], dtype=np.float32)
    m = EstimatorModel(dtype=np.float32, seed=0)
    out, h = train(m, data, data, TrainConfig(epochs=2, lr=0.0, weight_decay=0.0))
    assert h["best_epoch"] == 0 and out == m


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    X = np.ones((8, 4))
    Y = np.full((8, 2), 1e30)
    m = EstimatorModel([4, 3, 2], 0.0, 0)
    with pytest.raises(TrainingError):
        train(m, TrainingData(X, Y * 1e300), TrainingData(X, Y), TrainConfig(epochs=2))
    with pytest.raises(ValueError):
        train(m, TrainingData(X[:0], Y[:0]), TrainingData(X, Y), TrainConfig(epochs=1))


@given(st.integers(10, 500), st.floats(0.05, 0.5), st.integers(0, 100))
def test_split_voxels_partition(n, frac, seed):
    d = TrainingData(np.arange(n)[:, None].astype(float), np.zeros((n, 1)), ["a"])
    fit, hold = split_voxels(d, frac, seed)
    joined = np.sort(np.r_[fit.X[:, 0], hold.X[:, 0]])
    np.testing.assert_array_equal(joined, np.arange(n))
    assert len(hold) == max(1, round(frac * n))


def test_fine_tune_and_predict_volume(small_dhcp):
    m = EstimatorModel(dtype=np.float32, seed=0)
    data = training_data(small_dhcp[:1], dtype=np.float32)
    ft, h = fine_tune(m, data, TrainConfig.preset("finetune", epochs=2))
    assert h["train_subjects"] == [small_dhcp[0].id]
    fod = predict_volume(ft, small_dhcp[1])
    assert fod.shape == small_dhcp[1].gt_fod.shape
    np.testing.assert_array_equal(fod[~small_dhcp[1].wm_mask], 0.0)
