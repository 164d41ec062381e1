"""Pooling layers that turn a variable-length frame sequence into one vector.

Four kinds are provided:

    average              -- plain mean over frames
    statistics           -- mean and standard deviation over frames
    attentive_average    -- mean weighted by learned per-frame attention
    attentive_statistics -- weighted mean and weighted standard deviation,
                            with one shared weight per frame for both

All four run through a single weighted-statistics core, so the attentive
kinds with uniform weights agree bitwise with their unweighted counterparts.
The standard-deviation kinds clamp the variance below at ``variance_floor``
before the square root, keeping the value and its gradient finite when the
weighted variance cancels to zero (or slightly below, by rounding).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, EmptyInputError

POOLING_KINDS = ("average", "statistics", "attentive_average", "attentive_statistics")
ACTIVATIONS = ("identity", "relu", "tanh", "relu_framenorm")

# Epsilon for the frame-axis normalization inside relu_framenorm.
FRAMENORM_EPSILON = 1e-5

# Softmax weights are floored at the smallest normal double so that extreme
# score spreads cannot underflow a weight to exactly zero.
_WEIGHT_FLOOR = np.finfo(np.float64).tiny


@dataclass
class PoolingConfig:
    kind: str = "statistics"
    variance_floor: float = 1e-12

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")

    @property
    def uses_attention(self):
        return self.kind.startswith("attentive")

    @property
    def uses_stddev(self):
        return self.kind.endswith("statistics")

    def output_dim(self, input_dim):
        return 2 * input_dim if self.uses_stddev else input_dim


@dataclass
class AttentionParams:
    """Per-frame scoring network: score_t = v . f(W h_t + b) + k."""

    W: np.ndarray
    b: np.ndarray
    v: np.ndarray
    k: float
    activation: str = "relu_framenorm"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.W.ndim != 2:
            raise DimensionError("attention W must be 2-d")
        hidden = self.W.shape[0]
        if hidden < 1:
            raise DimensionError("attention hidden size must be >= 1")
        if self.b.shape != (hidden,) or self.v.shape != (hidden,):
            raise DimensionError("attention b and v must match W's row count")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown attention activation {self.activation!r}")


@dataclass
class AttentionWeights:
    """Raw scores e and their softmax-normalized weights alpha."""

    scores: np.ndarray
    weights: np.ndarray


@dataclass
class PooledStats:
    mean: np.ndarray
    stddev: Optional[np.ndarray] = None

    @property
    def concatenated(self):
        if self.stddev is None:
            return self.mean
        return np.concatenate([self.mean, self.stddev])


@dataclass
class AttentionGrads:
    W: np.ndarray
    b: np.ndarray
    v: np.ndarray
    k: float


@dataclass
class PoolCache:
    """Forward state retained for pooling_backward."""

    config: PoolingConfig
    frames: np.ndarray
    weights: np.ndarray
    mean: np.ndarray
    raw_var: Optional[np.ndarray] = None
    stddev: Optional[np.ndarray] = None
    attention: Optional[AttentionParams] = None
    attention_cache: Optional[tuple] = None
    alpha: Optional[AttentionWeights] = None
    consumed: bool = field(default=False, repr=False)


def _check_frames(frames):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise DimensionError(f"frames must be 2-d, got shape {frames.shape}")
    if frames.shape[0] < 1:
        raise EmptyInputError("cannot pool an empty sequence")
    return frames


def _uniform_weights(num_frames):
    return np.full(num_frames, 1.0 / num_frames)


def _frame_sum(values, axis=0):
    """Sum over the frame axis with the addends in sorted order.

    Sorting makes the result a function of the multiset of addends alone, so
    pooling outputs are exactly invariant under frame permutations instead of
    merely up to rounding.
    """
    return np.sort(values, axis=axis).sum(axis=axis)


def _weighted_mean(frames, weights):
    return _frame_sum(weights[:, None] * frames)


def _weighted_stats(frames, weights, floor):
    """Weighted mean plus floored weighted standard deviation.

    mean    = sum_t w_t h_t
    raw_var = sum_t w_t h_t*h_t - mean*mean
    stddev  = sqrt(max(raw_var, floor))
    """
    mean = _frame_sum(weights[:, None] * frames)
    second_moment = _frame_sum(weights[:, None] * frames * frames)
    raw_var = second_moment - mean * mean
    stddev = np.sqrt(np.maximum(raw_var, floor))
    return mean, raw_var, stddev


def pool_average(frames):
    """Arithmetic mean over frames."""
    frames = _check_frames(frames)
    return PooledStats(mean=_weighted_mean(frames, _uniform_weights(frames.shape[0])))


def pool_statistics(frames, floor=1e-12):
    """Mean and standard deviation over frames."""
    frames = _check_frames(frames)
    mean, _, stddev = _weighted_stats(frames, _uniform_weights(frames.shape[0]), floor)
    return PooledStats(mean=mean, stddev=stddev)


def pool_attentive_average(frames, alpha):
    """Attention-weighted mean."""
    frames = _check_frames(frames)
    weights = _alpha_vector(alpha, frames.shape[0])
    return PooledStats(mean=_weighted_mean(frames, weights))


def pool_attentive_statistics(frames, alpha, floor=1e-12):
    """Attention-weighted mean and standard deviation sharing one weight per frame."""
    frames = _check_frames(frames)
    weights = _alpha_vector(alpha, frames.shape[0])
    mean, _, stddev = _weighted_stats(frames, weights, floor)
    return PooledStats(mean=mean, stddev=stddev)


def _alpha_vector(alpha, num_frames):
    weights = alpha.weights if isinstance(alpha, AttentionWeights) else np.asarray(alpha)
    if weights.shape != (num_frames,):
        raise DimensionError(
            f"got {weights.shape[0] if weights.ndim == 1 else weights.shape} attention "
            f"weights for {num_frames} frames"
        )
    return np.asarray(weights, dtype=np.float64)


def attention_scores(frames, params, return_cache=False):
    """One scalar score per frame: e_t = v . f(W h_t + b) + k.

    For the ``relu_framenorm`` activation the post-ReLU activations are
    normalized per hidden unit by their mean and population variance over the
    frames of this utterance, so scores are a deterministic function of the
    single utterance at both train and inference time.
    """
    frames = _check_frames(frames)
    if frames.shape[1] != params.W.shape[1]:
        raise DimensionError(
            f"frames have dim {frames.shape[1]}, attention W expects {params.W.shape[1]}"
        )
    pre = frames @ params.W.T + params.b
    if params.activation == "identity":
        act = pre
        cache = (frames, pre, act, None)
    elif params.activation == "relu":
        act = np.maximum(0.0, pre)
        cache = (frames, pre, act, None)
    elif params.activation == "tanh":
        act = np.tanh(pre)
        cache = (frames, pre, act, None)
    else:  # relu_framenorm
        hidden = np.maximum(0.0, pre)
        centered = hidden - _frame_sum(hidden) / hidden.shape[0]
        variance = _frame_sum(centered * centered) / hidden.shape[0]
        inv_std = 1.0 / np.sqrt(variance + FRAMENORM_EPSILON)
        act = centered * inv_std
        cache = (frames, pre, act, inv_std)
    scores = act @ params.v + params.k
    if return_cache:
        return scores, cache
    return scores


def softmax_weights(scores):
    """Max-subtracted softmax of the scores; weights are positive and sum to 1."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("attention scores must be finite")
    shifted = np.exp(scores - scores.max())
    shifted = np.maximum(shifted, _WEIGHT_FLOOR)
    return AttentionWeights(scores=scores, weights=shifted / _frame_sum(shifted))


def pool_forward(frames, config, attention=None):
    """Run the configured pooling kind; returns (PooledStats, PoolCache).

    The attentive kinds require ``attention`` parameters; the plain kinds
    ignore them and use uniform weights through the same summation core.
    """
    frames = _check_frames(frames)
    alpha = None
    attention_cache = None
    if config.uses_attention:
        if attention is None:
            raise ValueError(f"pooling kind {config.kind!r} requires attention parameters")
        scores, attention_cache = attention_scores(frames, attention, return_cache=True)
        alpha = softmax_weights(scores)
        weights = alpha.weights
    else:
        weights = _uniform_weights(frames.shape[0])

    if config.uses_stddev:
        mean, raw_var, stddev = _weighted_stats(frames, weights, config.variance_floor)
    else:
        mean = _weighted_mean(frames, weights)
        raw_var, stddev = None, None

    stats = PooledStats(mean=mean, stddev=stddev)
    cache = PoolCache(
        config=config,
        frames=frames,
        weights=weights,
        mean=mean,
        raw_var=raw_var,
        stddev=stddev,
        attention=attention if config.uses_attention else None,
        attention_cache=attention_cache,
        alpha=alpha,
    )
    return stats, cache


def pooling_backward(cache, grad_out):
    """Exact vector-Jacobian product through the pooling layer.

    ``grad_out`` is the gradient with respect to the concatenated output
    (mean, or mean then stddev).  Returns ``(grad_frames, attention_grads)``
    where the second element is None for the non-attentive kinds.  The k
    offset provably receives zero gradient through the softmax (shift
    invariance); the returned value is the computed sum, which is zero up to
    rounding.
    """
    if not isinstance(cache, PoolCache):
        raise TypeError("pooling_backward needs the PoolCache from pool_forward")
    if cache.consumed:
        raise RuntimeError("pooling cache already consumed by a backward call")
    cache.consumed = True

    config = cache.config
    frames, weights = cache.frames, cache.weights
    dim = frames.shape[1]
    grad_out = np.asarray(grad_out, dtype=np.float64)
    expected = config.output_dim(dim)
    if grad_out.shape != (expected,):
        raise DimensionError(f"grad_out must have shape ({expected},), got {grad_out.shape}")

    if config.uses_stddev:
        g_mean, g_std = grad_out[:dim], grad_out[dim:]
        # sqrt and floor: gradient passes only where the raw variance is above
        # the clamp.
        pass_mask = cache.raw_var > config.variance_floor
        g_var = np.where(pass_mask, g_std * 0.5 / cache.stddev, 0.0)
        g_second = g_var
        g_mu = g_mean - 2.0 * cache.mean * g_var
        grad_frames = weights[:, None] * (g_mu[None, :] + 2.0 * frames * g_second[None, :])
        g_weights = frames @ g_mu + (frames * frames) @ g_second
    else:
        g_mu = grad_out
        grad_frames = weights[:, None] * g_mu[None, :]
        g_weights = frames @ g_mu

    if not config.uses_attention:
        return grad_frames, None

    # Through the softmax: d e = alpha * (d alpha - <alpha, d alpha>).
    alpha = weights
    g_scores = alpha * (g_weights - alpha @ g_weights)

    params = cache.attention
    _, pre, act, inv_std = cache.attention_cache
    g_act = np.outer(g_scores, params.v)
    g_v = act.T @ g_scores
    g_k = float(g_scores.sum())

    if params.activation == "identity":
        g_pre = g_act
    elif params.activation == "relu":
        g_pre = g_act * (pre > 0)
    elif params.activation == "tanh":
        g_pre = g_act * (1.0 - act * act)
    else:  # relu_framenorm: normalization couples all frames per hidden unit
        g_hidden = inv_std * (
            g_act - g_act.mean(axis=0) - act * (g_act * act).mean(axis=0)
        )
        g_pre = g_hidden * (pre > 0)

    g_w = g_pre.T @ frames
    g_b = g_pre.sum(axis=0)
    grad_frames = grad_frames + g_pre @ params.W
    return grad_frames, AttentionGrads(W=g_w, b=g_b, v=g_v, k=g_k)
