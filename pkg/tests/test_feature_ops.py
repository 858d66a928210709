import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aafkit.feature_ops import (
    LayerNormParams,
    MlpWeights,
    check_pyramid,
    flatten_spatial,
    global_max_pool,
    layer_norm,
    mlp_forward,
    row_softmax,
    unflatten_spatial,
)

import oracles


class TestFlatten:
    def test_single_value(self):
        np.testing.assert_array_equal(flatten_spatial(np.full((1, 1, 1), 5.0)), [[5.0]])

    def test_channel_major_layout(self):
        fmap = np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 1, 2)
        np.testing.assert_array_equal(flatten_spatial(fmap), [[1, 3], [2, 4]])

    def test_row_index_is_row_times_width_plus_col(self, rng):
        fmap = rng.normal(size=(3, 4, 5))
        flat = flatten_spatial(fmap)
        for r in range(4):
            for c in range(5):
                np.testing.assert_array_equal(flat[r * 5 + c], fmap[:, r, c])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_round_trip(self, d, h, w, seed):
        fmap = np.random.default_rng(seed).normal(size=(d, h, w))
        back = unflatten_spatial(flatten_spatial(fmap), h, w)
        assert back.tobytes() == fmap.tobytes()

    def test_unflatten_rejects_wrong_size(self):
        with pytest.raises(ValueError):
            unflatten_spatial(np.zeros((5, 2)), 2, 2)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            flatten_spatial(np.array([[[np.nan]]]))


class TestRowSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(row_softmax([[0.0, 0.0]]), [[0.5, 0.5]])

    def test_large_logits_do_not_overflow(self):
        np.testing.assert_allclose(row_softmax([[1000.0, 1000.0]]), [[0.5, 0.5]])

    def test_log_values(self):
        out = row_softmax([[math.log(2), math.log(4)]])
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], rtol=1e-12)

    def test_temperature_divides_logits(self):
        logits = np.array([[1.0, 3.0]])
        np.testing.assert_allclose(row_softmax(logits, 2.0), row_softmax(logits / 2.0))

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_temperature_must_be_positive(self, t):
        with pytest.raises(ValueError):
            row_softmax([[1.0]], t)

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            row_softmax([[np.inf, 0.0]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 2**31))
    def test_rows_sum_to_one_and_shift_invariant(self, n, m, shift, seed):
        x = np.random.default_rng(seed).normal(scale=5, size=(n, m))
        p = row_softmax(x)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        shifted = row_softmax(x + shift)
        assert np.max(np.abs(shifted - p) / np.maximum(p, 1e-300)) <= 1e-6


class TestGlobalMaxPool:
    def test_constant_map(self):
        np.testing.assert_array_equal(global_max_pool(np.full((3, 2, 2), 3.0)), [3, 3, 3])

    def test_two_positions(self):
        fmap = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])
        np.testing.assert_array_equal(global_max_pool(fmap), [2, 4])

    def test_single_position(self):
        fmap = np.array([[[7.0]], [[-1.0]]])
        np.testing.assert_array_equal(global_max_pool(fmap), [7, -1])

    def test_matches_position_scan(self, rng):
        for _ in range(50):
            d, h, w = rng.integers(1, 6, size=3)
            fmap = rng.normal(size=(d, h, w))
            expected = [max(fmap[c, r, col] for r in range(h) for col in range(w)) for c in range(d)]
            np.testing.assert_array_equal(global_max_pool(fmap), expected)
            np.testing.assert_array_equal(global_max_pool(flatten_spatial(fmap)), expected)


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(np.full((1, 4), 2.5), LayerNormParams.identity(4))
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_plus_minus_one(self):
        out = layer_norm(np.array([[1.0, -1.0]]), LayerNormParams.identity(2, epsilon=1e-12))
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-6)

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.normal(size=3)
        out = layer_norm(rng.normal(size=(5, 3)), LayerNormParams(np.zeros(3), beta))
        np.testing.assert_array_equal(out, np.tile(beta, (5, 1)))

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ValueError):
            LayerNormParams(np.ones(2), np.zeros(2), 0.0)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            layer_norm(np.ones((2, 3)), LayerNormParams.identity(2))

    def test_normalized_moments(self, rng):
        params = LayerNormParams.identity(6, epsilon=1e-12)
        for _ in range(100):
            x = rng.normal(scale=rng.uniform(0.1, 10), size=(3, 6)) + rng.normal()
            out = layer_norm(x, params)
            assert np.all(np.abs(out.mean(axis=1)) <= 1e-6)
            assert np.all(np.abs(out.var(axis=1) - 1.0) <= 1e-4)


class TestMlp:
    def test_zero_weights_give_output_bias(self):
        c = np.array([1.5, -2.0, 0.25])
        w = MlpWeights(np.zeros((2, 4)), np.zeros(4), np.zeros((4, 3)), c)
        np.testing.assert_array_equal(mlp_forward(np.ones((5, 2)), w), np.tile(c, (5, 1)))

    def test_identity_chain(self, rng):
        w = MlpWeights(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
        x = np.abs(rng.normal(size=(4, 3)))
        np.testing.assert_array_equal(mlp_forward(x, w), x)

    def test_against_loop_oracle(self, rng):
        for _ in range(20):
            w = MlpWeights.random(2, 2, 2, rng)
            x = rng.normal(size=(2, 2))
            expected = oracles.mlp(x.tolist(), w.w1.tolist(), w.b1.tolist(), w.w2.tolist(), w.b2.tolist())
            np.testing.assert_allclose(mlp_forward(x, w), expected, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            MlpWeights(np.zeros((2, 3)), np.zeros(4), np.zeros((3, 2)), np.zeros(2))
        w = MlpWeights(np.zeros((2, 3)), np.zeros(3), np.zeros((3, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            mlp_forward(np.zeros((1, 5)), w)

    def test_dict_round_trip(self, rng):
        w = MlpWeights.random(3, 4, 2, rng)
        back = MlpWeights.from_dict(w.to_dict())
        np.testing.assert_array_equal(back.w1, w.w1)
        np.testing.assert_array_equal(back.b2, w.b2)


def test_pyramid_channel_mismatch():
    with pytest.raises(ValueError):
        check_pyramid([np.zeros((2, 2, 2)), np.zeros((3, 1, 1))])
