"""Shared test utilities: independent oracles and well-conditioned points.

The oracles here deliberately recompute things the library computes, by a
different route (brute-force counting, direct formula evaluation), so that
library results are checked against an independent path.
"""

import numpy as np

from spkembed import NetworkConfig, PoolingConfig, build_network
from spkembed.layers import softmax_cross_entropy_batch
from spkembed.model import backward_batch, forward_batch

def tiny_config(kind, seed=0, num_speakers=4, input_dim=3, width=6,
                utterance_layers=(7, 6), attention_hidden=5):
    """A full-depth network small enough for exhaustive gradient checking.

    Keeps the recipe's context offsets (15-frame receptive field) but shrinks
    every width.
    """
    return NetworkConfig(
        input_dim=input_dim,
        num_speakers=num_speakers,
        tdnn_layers=(
            ((-2, -1, 0, 1, 2), width),
            ((-2, 0, 2), width),
            ((-3, 0, 3), width),
            ((0,), width),
            ((0,), width + 4),
        ),
        pooling=PoolingConfig(kind),
        attention_hidden=attention_hidden,
        utterance_layers=utterance_layers,
        seed=seed,
    )


def randomize_running_stats(model, rng):
    """Give batch-norm running statistics non-trivial values so infer-mode
    normalization is not a no-op."""
    for running in model.bn_running.values():
        running["mean"] = rng.normal(0.0, 0.3, running["mean"].shape)
        running["var"] = np.exp(rng.normal(0.0, 0.3, running["var"].shape))


def relu_margin(tape):
    """Smallest |pre-activation| over every ReLU in a forward tape.

    Used to reject gradient-check points sitting on a ReLU kink, where the
    loss is not differentiable.
    """
    margin = np.inf
    for layer in tape["tdnn"] + tape["utt"]:
        pre = layer["relu"]
        margin = min(margin, float(np.abs(pre).min()))
    for cache in tape["pool"]:
        if cache.attention_cache is not None:
            pre = cache.attention_cache[1]
            margin = min(margin, float(np.abs(pre).min()))
    return margin


def network_loss_fn(model, labels, mode):
    """Scalar loss over (all parameters, all input sequences) with gradients,
    in the shape expected by grad_check."""
    names = model.param_names()

    def fn(arrays):
        for name, arr in zip(names, arrays):
            model.params[name][...] = arr
        seqs = arrays[len(names):]
        logits, tape = forward_batch(model, seqs, mode)
        losses, d_logits = softmax_cross_entropy_batch(logits, labels)
        grads, d_seqs = backward_batch(model, tape, d_logits / len(seqs))
        return float(losses.mean()), [grads[n] for n in names] + list(d_seqs)

    return fn


def well_conditioned_point(kind, seed, mode="infer", num_seqs=2, frames=20, min_margin=1e-3):
    """Model + inputs + loss function at a point clear of ReLU kinks.

    Re-seeds deterministically until every ReLU pre-activation has at least
    ``min_margin`` of slack, so central differences with steps well below the
    margin never cross a kink.
    """
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        cfg = tiny_config(kind, seed=int(rng.integers(1 << 31)))
        model = build_network(cfg)
        randomize_running_stats(model, rng)
        seqs = [
            rng.normal(0.0, 1.0, (frames + int(rng.integers(0, 8)), cfg.input_dim))
            for _ in range(num_seqs)
        ]
        labels = rng.integers(0, cfg.num_speakers, num_seqs)
        logits, tape = forward_batch(model, seqs, mode)
        if relu_margin(tape) >= min_margin:
            names = model.param_names()
            point = [model.params[n].copy() for n in names] + [s.copy() for s in seqs]
            return model, labels, point
    raise AssertionError("could not find a well-conditioned point")


def sweep_eer_oracle(targets, nontargets):
    """O(n^2) threshold-sweep EER: count misses and false alarms at every
    candidate threshold by brute force, then interpolate at the crossing."""
    targets = np.asarray(targets, dtype=np.float64)
    nontargets = np.asarray(nontargets, dtype=np.float64)
    thresholds = [-np.inf] + sorted(set(targets) | set(nontargets)) + [np.inf]
    points = []
    for threshold in thresholds:
        p_miss = sum(1 for t in targets if t < threshold) / len(targets)
        p_fa = sum(1 for s in nontargets if s >= threshold) / len(nontargets)
        points.append((p_miss, p_fa))
    for (m1, f1), (m2, f2) in zip(points, points[1:]):
        if m2 >= f2:  # crossing bracketed
            if m1 == f1:
                return m1
            frac = (f1 - m1) / ((m2 - m1) - (f2 - f1))
            return m1 + frac * (m2 - m1)
    raise AssertionError("no crossing found")


def sweep_min_dcf_oracle(targets, nontargets, p_tar, c_miss=1.0, c_fa=1.0):
    """O(n^2) threshold-sweep minimum normalized detection cost."""
    targets = np.asarray(targets, dtype=np.float64)
    nontargets = np.asarray(nontargets, dtype=np.float64)
    thresholds = [-np.inf] + sorted(set(targets) | set(nontargets)) + [np.inf]
    best = np.inf
    for threshold in thresholds:
        p_miss = sum(1 for t in targets if t < threshold) / len(targets)
        p_fa = sum(1 for s in nontargets if s >= threshold) / len(nontargets)
        best = min(best, c_miss * p_tar * p_miss + c_fa * (1 - p_tar) * p_fa)
    return best / min(c_miss * p_tar, c_fa * (1 - p_tar))
