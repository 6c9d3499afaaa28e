import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osafl import core_ml
from osafl.core_ml import ModelSpec


def toy_data(rng, n=30, d=4, classes=3):
    X = rng.normal(size=(n, d))
    y = rng.integers(0, classes, size=n)
    return X, y


def fd_gradient(spec, w, X, y, h=1e-6):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (core_ml.loss(spec, w + e, X, y) - core_ml.loss(spec, w - e, X, y)) / (2 * h)
    return g


def test_param_count_single_layer():
    assert core_ml.init_params(ModelSpec((4, 3)), 7).shape == (15,)


def test_param_count_and_bound_two_layers():
    w = core_ml.init_params(ModelSpec((4, 8, 3)), 7)
    assert w.shape == (67,)
    assert np.max(np.abs(w)) <= 0.5


def test_init_is_deterministic():
    spec = ModelSpec((5, 6, 2))
    assert np.array_equal(core_ml.init_params(spec, 3), core_ml.init_params(spec, 3))
    assert not np.array_equal(core_ml.init_params(spec, 3), core_ml.init_params(spec, 4))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec((4,))
    with pytest.raises(ValueError):
        ModelSpec((4, 0, 3))


def test_unpack_layout():
    spec = ModelSpec((2, 3))
    w = np.arange(9.0)
    (W, b), = spec.unpack(w)
    assert W.tolist() == [[0, 1, 2], [3, 4, 5]]
    assert b.tolist() == [6, 7, 8]


def test_uniform_output_loss_is_log_classes():
    spec = ModelSpec((4, 5))
    X = np.random.default_rng(0).normal(size=(10, 4))
    y = np.arange(10) % 5
    assert core_ml.loss(spec, np.zeros(spec.n_params), X, y) == pytest.approx(math.log(5), abs=1e-12)


def test_empty_dataset_rejected():
    spec = ModelSpec((2, 2))
    with pytest.raises(ValueError, match="empty dataset"):
        core_ml.loss(spec, np.zeros(spec.n_params), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError, match="empty dataset"):
        core_ml.stack_samples([])


def test_sgd_step_shape_mismatch():
    with pytest.raises(ValueError):
        core_ml.sgd_step(np.zeros(3), np.zeros(4), 0.1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), hidden=st.integers(1, 6), classes=st.integers(2, 5))
def test_gradient_matches_finite_differences(seed, hidden, classes):
    rng = np.random.default_rng(seed)
    spec = ModelSpec((3, hidden, classes))
    w = core_ml.init_params(spec, seed)
    X, y = toy_data(rng, n=8, d=3, classes=classes)
    g = core_ml.gradient(spec, w, X, y)
    fd = fd_gradient(spec, w, X, y)
    assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec((4, 6, 3))
    X, y = toy_data(rng)
    assert core_ml.loss(spec, rng.normal(size=spec.n_params) * 3, X, y) >= 0


def test_kappa_one_gives_single_gradient():
    rng = np.random.default_rng(1)
    spec = ModelSpec((4, 5, 3))
    w = core_ml.init_params(spec, 1)
    X, y = toy_data(rng)
    _, d = core_ml.local_train(spec, w, X, y, 1, 0.1, 5, np.random.default_rng(9))
    idx = np.random.default_rng(9).integers(0, y.size, size=5)
    g = core_ml.gradient(spec, w, X[idx], y[idx])
    np.testing.assert_allclose(d, g, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), kappa=st.integers(1, 8), lr=st.floats(1e-3, 1.0))
def test_local_train_identity(seed, kappa, lr):
    rng = np.random.default_rng(seed)
    spec = ModelSpec((4, 5, 3))
    w = core_ml.init_params(spec, seed)
    X, y = toy_data(rng)
    w_final, d = core_ml.local_train(spec, w, X, y, kappa, lr, 5, rng)
    np.testing.assert_allclose(lr * kappa * d + w_final, w, rtol=0, atol=1e-12)


def test_d_is_mean_of_step_gradients():
    rng = np.random.default_rng(2)
    spec = ModelSpec((4, 5, 3))
    w = core_ml.init_params(spec, 2)
    X, y = toy_data(rng)
    w_final, g_sum = core_ml.sgd_trajectory(spec, w, X, y, 4, 0.05, 5, np.random.default_rng(3))
    _, d = core_ml.local_train(spec, w, X, y, 4, 0.05, 5, np.random.default_rng(3))
    np.testing.assert_allclose(d, g_sum / 4, rtol=0, atol=1e-10)


def test_local_train_reproducible_bitwise():
    rng = np.random.default_rng(4)
    spec = ModelSpec((4, 5, 3))
    w = core_ml.init_params(spec, 4)
    X, y = toy_data(rng)
    a = core_ml.local_train(spec, w, X, y, 5, 0.1, 5, np.random.default_rng(11))[0]
    b = core_ml.local_train(spec, w, X, y, 5, 0.1, 5, np.random.default_rng(11))[0]
    assert a.tobytes() == b.tobytes()


def test_no_local_budget():
    spec = ModelSpec((2, 2))
    with pytest.raises(ValueError, match="no local budget"):
        core_ml.local_train(spec, np.zeros(spec.n_params), np.ones((3, 2)), [0, 1, 0], 0, 0.1, 2,
                            np.random.default_rng(0))


def test_training_reduces_loss_on_separable_data():
    rng = np.random.default_rng(5)
    X = np.vstack([rng.normal(-2, 0.5, size=(50, 2)), rng.normal(2, 0.5, size=(50, 2))])
    y = np.repeat([0, 1], 50)
    spec = ModelSpec((2, 8, 2))
    w = core_ml.init_params(spec, 0)
    w2, _ = core_ml.sgd_trajectory(spec, w, X, y, 200, 0.1, 10, rng)
    assert core_ml.loss(spec, w2, X, y) < core_ml.loss(spec, w, X, y)
    assert core_ml.accuracy(spec, w2, X, y) > 0.95
