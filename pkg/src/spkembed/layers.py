"""Differentiable layer primitives used by the embedding network.

Every forward function returns ``(output, cache)`` where the cache holds the
activations needed by the matching backward function; backward functions take
the upstream gradient plus that cache and return gradients with respect to
inputs and parameters.  All math runs in double precision.

Conventions:
    - A "matrix" is a 2-d float64 ndarray whose rows are batch entries
      (frames of one utterance, or utterances of one minibatch).
    - Affine weights have shape (out, in) and act as y = x @ W.T + b.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, DimensionError, ShortSequenceError


def as_matrix(x, name="input"):
    """Validate and return a finite 2-d float64 array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-d array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


@dataclass
class AffineParams:
    """Fully-connected layer parameters: weight is (out, in), bias is (out,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("weight must be 2-d and bias 1-d")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("affine parameters contain non-finite values")


@dataclass
class BatchNormState:
    """Batch-norm parameters plus running statistics.

    ``gamma``/``beta`` are trainable; ``running_mean``/``running_var`` are
    updated by exponential moving average in train mode and used verbatim in
    infer mode.  The state is treated as immutable: train-mode forwards return
    a fresh state holding the updated running statistics.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        lengths = {
            self.gamma.shape,
            self.beta.shape,
            self.running_mean.shape,
            self.running_var.shape,
        }
        if len(lengths) != 1 or self.gamma.ndim != 1:
            raise DimensionError("batch-norm vectors must share one 1-d shape")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if not (0 < self.momentum <= 1):
            raise ValueError("momentum must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def fresh(cls, dim, momentum=0.1, epsilon=1e-5):
        return cls(
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
            epsilon=epsilon,
        )


def affine_forward(x, params):
    """y = x @ W.T + b, bias broadcast per row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != params.weight.shape[1]:
        raise DimensionError(
            f"affine input has {x.shape[1]} columns, weight expects {params.weight.shape[1]}"
        )
    y = x @ params.weight.T + params.bias
    return y, (x, params.weight)


def affine_backward(d_out, cache):
    """Gradients of the affine layer: returns (d_x, d_weight, d_bias)."""
    x, weight = cache
    d_x = d_out @ weight
    d_weight = d_out.T @ x
    d_bias = d_out.sum(axis=0)
    return d_x, d_weight, d_bias


def relu_forward(x):
    """Elementwise max(0, x)."""
    y = np.maximum(0.0, x)
    return y, x


def relu_backward(d_out, cache):
    x = cache
    return d_out * (x > 0)


def batchnorm_forward(x, state, mode):
    """Normalize columns of ``x`` by batch statistics (train) or running stats (infer).

    Train mode uses the population variance of the current batch, scales by
    gamma, shifts by beta, and returns a new state whose running statistics
    moved toward the batch statistics by ``momentum``.

    Returns ``(y, cache, new_state)``; in infer mode ``new_state is state``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(
            f"batch-norm input has {x.shape[1]} columns, state expects {state.gamma.shape[0]}"
        )
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                f"train-mode batch norm needs at least 2 rows, got {x.shape[0]}"
            )
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        x_hat = (x - mean) * inv_std
        y = state.gamma * x_hat + state.beta
        new_state = BatchNormState(
            gamma=state.gamma,
            beta=state.beta,
            running_mean=(1.0 - state.momentum) * state.running_mean + state.momentum * mean,
            running_var=(1.0 - state.momentum) * state.running_var + state.momentum * var,
            momentum=state.momentum,
            epsilon=state.epsilon,
        )
        cache = ("train", x_hat, inv_std, state.gamma)
        return y, cache, new_state
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        x_hat = (x - state.running_mean) * inv_std
        y = state.gamma * x_hat + state.beta
        cache = ("infer", x_hat, inv_std, state.gamma)
        return y, cache, state
    raise ValueError(f"unknown batch-norm mode {mode!r}")


def batchnorm_backward(d_out, cache):
    """Gradients of batch norm: returns (d_x, d_gamma, d_beta)."""
    mode, x_hat, inv_std, gamma = cache
    d_gamma = (d_out * x_hat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_hat = d_out * gamma
    if mode == "infer":
        # Running statistics are constants, so the layer is affine in x.
        return d_hat * inv_std, d_gamma, d_beta
    n = x_hat.shape[0]
    d_x = (inv_std / n) * (
        n * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0)
    )
    return d_x, d_gamma, d_beta


def splice_output_length(num_frames, offsets):
    span = max(offsets) - min(offsets)
    return num_frames - span


def tdnn_splice(frames, offsets):
    """Concatenate frames at fixed offsets; "valid" edge policy, no padding.

    Output frame t is the concatenation of input frames t + offset - min(offsets)
    for each offset, so the output is shorter by max(offsets) - min(offsets).
    """
    frames = np.asarray(frames, dtype=np.float64)
    offsets = tuple(offsets)
    if list(offsets) != sorted(offsets):
        raise ValueError("offsets must be an ordered list")
    t_out = splice_output_length(frames.shape[0], offsets)
    if t_out < 1:
        raise ShortSequenceError(
            f"sequence of {frames.shape[0]} frames is too short for context span "
            f"{max(offsets) - min(offsets) + 1}"
        )
    lo = min(offsets)
    return np.hstack([frames[o - lo : o - lo + t_out] for o in offsets])


def tdnn_splice_backward(d_out, num_frames, offsets):
    """Scatter-add the spliced gradient back onto the input frames."""
    offsets = tuple(offsets)
    t_out = d_out.shape[0]
    dim = d_out.shape[1] // len(offsets)
    lo = min(offsets)
    d_frames = np.zeros((num_frames, dim))
    for j, o in enumerate(offsets):
        d_frames[o - lo : o - lo + t_out] += d_out[:, j * dim : (j + 1) * dim]
    return d_frames


def softmax_cross_entropy(logits, label):
    """Cross-entropy of a softmax over ``logits`` against an integer label.

    Computed with max subtraction for overflow safety.  Returns
    ``(loss, grad)`` where grad = softmax(logits) - onehot(label).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return loss, grad


def softmax_cross_entropy_batch(logits, labels):
    """Row-wise cross-entropy; returns (losses (n,), grads (n, c))."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise IndexError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(logits.shape[0])
    losses = (log_z[:, 0] - shifted[rows, labels])
    grads = np.exp(shifted - log_z)
    grads[rows, labels] -= 1.0
    return losses, grads


def grad_check(fn, point, step=1e-5, num_directions=10, rng=None):
    """Compare analytic gradients of a scalar function against central differences.

    ``fn`` maps a list of arrays to ``(value, grads)`` with one gradient array
    per input.  The check perturbs all inputs jointly along random unit
    directions and returns the worst relative error between the analytic
    directional derivative and the central finite difference.

    The caller is responsible for choosing points away from non-differentiable
    kinks (ReLU zeros, variance floors).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    point = [np.asarray(p, dtype=np.float64) for p in point]
    _, grads = fn(point)
    worst = 0.0
    for _ in range(num_directions):
        direction = [rng.standard_normal(p.shape) for p in point]
        norm = np.sqrt(sum(float((d * d).sum()) for d in direction))
        direction = [d / norm for d in direction]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
        plus, _ = fn([p + step * d for p, d in zip(point, direction)])
        minus, _ = fn([p - step * d for p, d in zip(point, direction)])
        numeric = (plus - minus) / (2.0 * step)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
