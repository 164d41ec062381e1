import math

import numpy as np
import pytest

from spkembed.errors import DimensionError, EmptyInputError
from spkembed.layers import grad_check
from spkembed.pooling import (
    AttentionParams,
    PoolingConfig,
    attention_scores,
    pool_attentive_average,
    pool_attentive_statistics,
    pool_average,
    pool_forward,
    pool_statistics,
    pooling_backward,
    softmax_weights,
)


def random_attention(rng, dim, hidden=5, activation="relu_framenorm", k=0.3):
    return AttentionParams(
        W=rng.normal(0.0, 0.5, (hidden, dim)),
        b=rng.normal(0.0, 0.2, hidden),
        v=rng.normal(0.0, 0.7, hidden),
        k=k,
        activation=activation,
    )


class TestPoolAverage:
    def test_direct_summation(self):
        np.testing.assert_allclose(pool_average(np.array([[1.0], [3.0]])).mean, [2.0])

    def test_single_frame(self):
        frame = np.array([[0.5, -1.5, 2.0]])
        np.testing.assert_array_equal(pool_average(frame).mean, frame[0])

    def test_constant_frames(self):
        frames = np.tile([1.5, -0.5], (7, 1))
        np.testing.assert_allclose(pool_average(frames).mean, [1.5, -0.5])

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            pool_average(np.zeros((0, 3)))

    def test_no_stddev(self):
        stats = pool_average(np.ones((3, 2)))
        assert stats.stddev is None
        assert stats.concatenated.shape == (2,)


class TestPoolStatistics:
    def test_direct_summation(self):
        stats = pool_statistics(np.array([[1.0], [3.0]]))
        np.testing.assert_allclose(stats.mean, [2.0])
        np.testing.assert_allclose(stats.stddev, [1.0])

    def test_second_fixture(self):
        stats = pool_statistics(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(stats.mean, [1.0])
        np.testing.assert_allclose(stats.stddev, [1.0])

    def test_constant_frames_hit_floor(self):
        stats = pool_statistics(np.tile([2.0, -1.0], (5, 1)), floor=1e-12)
        np.testing.assert_allclose(stats.stddev, [math.sqrt(1e-12)] * 2)

    def test_concatenated_layout(self):
        stats = pool_statistics(np.random.default_rng(0).normal(size=(6, 3)))
        np.testing.assert_array_equal(stats.concatenated[:3], stats.mean)
        np.testing.assert_array_equal(stats.concatenated[3:], stats.stddev)
        assert np.all(stats.stddev >= 0)

    def test_binary_scaling_exact(self):
        # Scaling frames by a power of two scales mean and stddev exactly;
        # binary scales are the cases where float exactness is well-defined.
        rng = np.random.default_rng(1)
        frames = rng.normal(size=(9, 4))
        base = pool_statistics(frames)
        for c in (2.0, 0.5, 4.0):
            scaled = pool_statistics(c * frames)
            np.testing.assert_array_equal(scaled.mean, c * base.mean)
            np.testing.assert_array_equal(scaled.stddev, c * base.stddev)

    def test_general_scaling_close(self):
        rng = np.random.default_rng(2)
        frames = rng.normal(size=(9, 4))
        base = pool_statistics(frames)
        scaled = pool_statistics(1.7 * frames)
        np.testing.assert_allclose(scaled.mean, 1.7 * base.mean, rtol=1e-12)
        np.testing.assert_allclose(scaled.stddev, 1.7 * base.stddev, rtol=1e-12)


class TestAttentionScores:
    def test_direct_evaluation(self):
        params = AttentionParams(
            W=np.array([[1.0]]), b=np.array([0.0]), v=np.array([2.0]), k=1.0,
            activation="identity",
        )
        scores = attention_scores(np.array([[1.0], [2.0]]), params)
        np.testing.assert_allclose(scores, [3.0, 5.0])

    def test_zero_v_collapses_to_k(self):
        rng = np.random.default_rng(3)
        params = random_attention(rng, 4)
        params.v = np.zeros_like(params.v)
        params.k = -0.7
        scores = attention_scores(rng.normal(size=(6, 4)), params)
        np.testing.assert_array_equal(scores, np.full(6, -0.7))

    def test_identical_frames_equal_scores(self):
        rng = np.random.default_rng(4)
        for activation in ("identity", "relu", "tanh", "relu_framenorm"):
            params = random_attention(rng, 3, activation=activation)
            frames = np.tile(rng.normal(size=3), (5, 1))
            scores = attention_scores(frames, params)
            assert np.ptp(scores) == 0.0

    def test_dimension_error(self):
        params = random_attention(np.random.default_rng(5), 4)
        with pytest.raises(DimensionError):
            attention_scores(np.zeros((3, 5)), params)

    def test_framenorm_deterministic(self):
        rng = np.random.default_rng(6)
        params = random_attention(rng, 4)
        frames = rng.normal(size=(10, 4))
        np.testing.assert_array_equal(
            attention_scores(frames, params), attention_scores(frames, params)
        )


class TestSoftmaxWeights:
    def test_uniform(self):
        weights = softmax_weights(np.zeros(3)).weights
        np.testing.assert_allclose(weights, [1 / 3] * 3)

    def test_quarter_three_quarters(self):
        weights = softmax_weights(np.array([0.0, math.log(3.0)])).weights
        np.testing.assert_allclose(weights, [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            scores = rng.normal(0.0, 3.0, int(rng.integers(1, 30)))
            base = softmax_weights(scores).weights
            shifted = softmax_weights(scores + rng.normal(0.0, 10.0)).weights
            assert np.max(np.abs(base - shifted)) <= 1e-15

    def test_positive_and_normalized(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            scores = rng.normal(0.0, 5.0, int(rng.integers(1, 50)))
            weights = softmax_weights(scores).weights
            assert np.all(weights > 0)
            assert abs(weights.sum() - 1.0) < 1e-12


class TestAttentivePooling:
    def test_weighted_mean_fixture(self):
        stats = pool_attentive_average(np.array([[0.0], [2.0]]), np.array([0.25, 0.75]))
        np.testing.assert_allclose(stats.mean, [1.5])

    def test_uniform_alpha_equals_average_bitwise(self):
        rng = np.random.default_rng(9)
        frames = rng.normal(size=(11, 4))
        uniform = np.full(11, 1.0 / 11)
        np.testing.assert_array_equal(
            pool_attentive_average(frames, uniform).mean, pool_average(frames).mean
        )

    def test_selection_weight(self):
        frames = np.array([[3.0, -1.0], [99.0, 99.0]])
        stats = pool_attentive_average(frames, np.array([1.0, 0.0]))
        np.testing.assert_array_equal(stats.mean, frames[0])

    def test_attentive_statistics_fixture(self):
        stats = pool_attentive_statistics(np.array([[0.0], [2.0]]), np.array([0.25, 0.75]))
        np.testing.assert_allclose(stats.mean, [1.5])
        np.testing.assert_allclose(stats.stddev, [math.sqrt(3.0 - 2.25)])

    def test_uniform_alpha_equals_statistics_bitwise(self):
        rng = np.random.default_rng(10)
        frames = rng.normal(size=(13, 5))
        uniform = np.full(13, 1.0 / 13)
        att = pool_attentive_statistics(frames, uniform)
        plain = pool_statistics(frames)
        np.testing.assert_array_equal(att.mean, plain.mean)
        np.testing.assert_array_equal(att.stddev, plain.stddev)

    def test_selection_weight_floors_stddev(self):
        frames = np.array([[3.0], [-5.0]])
        stats = pool_attentive_statistics(frames, np.array([1.0, 0.0]), floor=1e-12)
        np.testing.assert_allclose(stats.stddev, [math.sqrt(1e-12)])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            pool_attentive_average(np.zeros((3, 2)), np.array([0.5, 0.5]))


class TestPoolForwardInvariants:
    def test_zero_v_reduces_to_statistics(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            frames = rng.normal(size=(int(rng.integers(2, 40)), 6))
            params = random_attention(rng, 6, k=float(rng.normal()))
            params.v = np.zeros_like(params.v)
            att, _ = pool_forward(frames, PoolingConfig("attentive_statistics"), params)
            plain, _ = pool_forward(frames, PoolingConfig("statistics"))
            assert np.max(np.abs(att.concatenated - plain.concatenated)) < 1e-12

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(12)
        frames = rng.normal(size=(31, 4))
        params = random_attention(rng, 4)
        perm = rng.permutation(31)
        for kind in ("average", "statistics", "attentive_average", "attentive_statistics"):
            cfg = PoolingConfig(kind)
            base, _ = pool_forward(frames, cfg, params)
            shuffled, _ = pool_forward(frames[perm], cfg, params)
            np.testing.assert_array_equal(base.concatenated, shuffled.concatenated)

    def test_attentive_permutation_with_explicit_alpha(self):
        rng = np.random.default_rng(13)
        frames = rng.normal(size=(17, 3))
        alpha = softmax_weights(rng.normal(size=17)).weights
        perm = rng.permutation(17)
        base = pool_attentive_statistics(frames, alpha)
        shuffled = pool_attentive_statistics(frames[perm], alpha[perm])
        np.testing.assert_array_equal(base.concatenated, shuffled.concatenated)

    def test_variance_floor_respected(self):
        rng = np.random.default_rng(14)
        cfg = PoolingConfig("attentive_statistics", variance_floor=1e-10)
        for _ in range(20):
            frames = rng.normal(0.0, 1e-4, size=(5, 3))
            params = random_attention(rng, 3)
            stats, _ = pool_forward(frames, cfg, params)
            assert np.all(stats.stddev >= 0)
            assert np.all(stats.stddev**2 >= 1e-10 * (1 - 1e-12))


class TestPoolingBackward:
    @pytest.mark.parametrize("kind", ["average", "statistics"])
    def test_plain_kinds_match_finite_differences(self, kind):
        rng = np.random.default_rng(15)
        cfg = PoolingConfig(kind)
        cotangent = rng.normal(size=cfg.output_dim(4))

        def fn(arrays):
            (frames,) = arrays
            stats, cache = pool_forward(frames, cfg)
            grad_frames, _ = pooling_backward(cache, cotangent)
            return float(cotangent @ stats.concatenated), [grad_frames]

        assert grad_check(fn, [rng.normal(size=(12, 4))], step=1e-6, rng=rng) < 1e-6

    @pytest.mark.parametrize("activation", ["identity", "relu", "tanh", "relu_framenorm"])
    @pytest.mark.parametrize("kind", ["attentive_average", "attentive_statistics"])
    def test_attentive_kinds_match_finite_differences(self, kind, activation):
        rng = np.random.default_rng(16)
        cfg = PoolingConfig(kind)
        cotangent = rng.normal(size=cfg.output_dim(4))

        def fn(arrays):
            frames, w, b, v, k = arrays
            params = AttentionParams(w, b, v, float(k), activation=activation)
            stats, cache = pool_forward(frames, cfg, params)
            grad_frames, att = pooling_backward(cache, cotangent)
            return float(cotangent @ stats.concatenated), [
                grad_frames, att.W, att.b, att.v, np.asarray(att.k),
            ]

        base = random_attention(rng, 4, activation=activation)
        point = [rng.normal(size=(12, 4)), base.W, base.b, base.v, np.asarray(0.3)]
        assert grad_check(fn, point, step=1e-6, rng=rng) < 1e-4

    def test_k_gradient_is_zero(self):
        rng = np.random.default_rng(17)
        cfg = PoolingConfig("attentive_statistics")
        params = random_attention(rng, 5)
        _, cache = pool_forward(rng.normal(size=(20, 5)), cfg, params)
        _, att = pooling_backward(cache, rng.normal(size=10))
        assert abs(att.k) < 1e-12

    def test_uniform_configuration_matches_statistics_gradient(self):
        # With v = 0 the attention weights are uniform, so the frame gradient
        # through the pooled statistics must match plain statistics pooling.
        rng = np.random.default_rng(18)
        frames = rng.normal(size=(9, 3))
        cotangent = rng.normal(size=6)
        params = random_attention(rng, 3)
        params.v = np.zeros_like(params.v)
        _, att_cache = pool_forward(frames, PoolingConfig("attentive_statistics"), params)
        att_grad, _ = pooling_backward(att_cache, cotangent)
        _, plain_cache = pool_forward(frames, PoolingConfig("statistics"))
        plain_grad, _ = pooling_backward(plain_cache, cotangent)
        np.testing.assert_allclose(att_grad, plain_grad, atol=1e-12)

    def test_cache_single_use(self):
        rng = np.random.default_rng(19)
        _, cache = pool_forward(rng.normal(size=(5, 2)), PoolingConfig("average"))
        pooling_backward(cache, np.zeros(2))
        with pytest.raises(RuntimeError):
            pooling_backward(cache, np.zeros(2))
