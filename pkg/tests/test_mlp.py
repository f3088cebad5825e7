#!/usr/bin/env python3

"""Tests for the coordinate MLP"""

import numpy as np
import pytest

from diffcore import check_gradients, precision
from mlp import MlpWeights, mlp_forward, mlp_init, parameter_count, topology


def test_zero_weights_give_zero_output():
    weights = MlpWeights([(np.zeros((4, 8)), np.zeros(8)), (np.zeros((8, 3)), np.zeros(3))])
    out = mlp_forward(np.array([0.3, -1.0, 2.0, 0.5]), weights)
    assert out.shape == (3,)
    assert np.all(out.data == 0.0)


def test_identity_layer_passes_input():
    x = np.array([[0.25, -0.5, 1.5]])
    with precision(np.float64):
        out = mlp_forward(x, MlpWeights([(np.eye(3), np.zeros(3))]))
    np.testing.assert_array_equal(out.data, x)


def test_two_layer_matches_matrix_arithmetic():
    weights = mlp_init([5, 7, 3], seed=7)
    x = np.random.default_rng(7).uniform(-1, 1, (4, 5))
    with precision(np.float64):
        out = mlp_forward(x, weights)
    (w0, b0), (w1, b1) = [(w.astype(np.float64), b.astype(np.float64)) for w, b in weights.layers]
    expected = np.maximum(x @ w0 + b0, 0.0) @ w1 + b1
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_init_is_seeded():
    a = mlp_init(topology(24, 3), seed=11)
    b = mlp_init(topology(24, 3), seed=11)
    c = mlp_init(topology(24, 3), seed=12)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(ba, bb)
    assert not np.array_equal(a.layers[0][0], c.layers[0][0])


def test_parameter_count():
    weights = mlp_init(topology(24, 3, 64, 4), seed=0)
    assert len(weights.layers) == 5
    assert parameter_count(weights) == 24 * 64 + 64 + 3 * (64 * 64 + 64) + 64 * 3 + 3


def test_final_bias_and_scale():
    weights = mlp_init([6, 4, 1], seed=0, final_bias=-2.0, final_scale=0.1)
    w_last, b_last = weights.layers[-1]
    np.testing.assert_array_equal(b_last, np.full(1, -2.0, dtype=np.float32))
    assert np.abs(w_last).max() <= 0.1 * np.sqrt(6.0 / 4) + 1e-7
    assert np.all(weights.layers[0][1] == 0.0)


def test_dimension_mismatch():
    weights = mlp_init([4, 8, 3], seed=0)
    with pytest.raises(ValueError, match="expects 4 input features, got 5"):
        mlp_forward(np.zeros((2, 5)), weights)


def test_inconsistent_layers_rejected():
    with pytest.raises(ValueError, match="layer 0 outputs 8"):
        MlpWeights([(np.zeros((4, 8)), np.zeros(8)), (np.zeros((6, 3)), np.zeros(3))])
    with pytest.raises(ValueError, match="bias"):
        MlpWeights([(np.zeros((4, 8)), np.zeros(3))])
    with pytest.raises(ValueError):
        mlp_init([4], seed=0)


def test_input_gradients():
    weights = mlp_init([3, 6, 6, 2], seed=4, final_scale=1.0)
    x = np.random.default_rng(5).uniform(-1, 1, (5, 3))
    assert check_gradients(lambda t: mlp_forward(t, weights).sum(), x, 1e-6) < 1e-5


def _relu_pattern(x, weights):
    pattern = []
    h = np.asarray(x, dtype=np.float64)
    for w, b in weights.layers[:-1]:
        h = h @ w.astype(np.float64) + b.astype(np.float64)
        pattern.append(h > 0)
        h = np.maximum(h, 0.0)
    return np.concatenate(pattern)


def test_affine_within_one_activation_region():
    weights = mlp_init([4, 16, 16, 3], seed=21, final_scale=1.0)
    rng = np.random.default_rng(21)
    x0 = rng.uniform(-1, 1, 4)
    direction = rng.normal(size=4)
    step = 0.5
    for _ in range(40):
        x1 = x0 + step * direction
        if np.array_equal(_relu_pattern(x0, weights), _relu_pattern(x1, weights)):
            break
        step /= 2
    else:
        pytest.fail("no shared activation region found")
    with precision(np.float64):
        f0, f1 = mlp_forward(x0, weights).data, mlp_forward(x1, weights).data
        for t in (0.25, 0.5, 0.8):
            mixed = mlp_forward((1 - t) * x0 + t * x1, weights).data
            np.testing.assert_allclose(mixed, (1 - t) * f0 + t * f1, rtol=1e-12, atol=1e-12)
