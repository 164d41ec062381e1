"""Minibatch construction, optimizers, and the training loop.

Batches are rectangular: every selected utterance contributes one random
contiguous chunk of ``chunk_frames`` frames (utterances shorter than the
chunk are repeated cyclically).  The batch stream is a pure function of
(seed, epoch), so a seeded run always reproduces the same checkpoint bytes.
"""

from dataclasses import dataclass

import numpy as np

from . import corpus as corpus_mod
from .errors import ConfigError, DivergenceError
from .layers import softmax_cross_entropy_batch
from .model import backward_batch, commit_bn_updates, forward_batch, save_checkpoint

OPTIMIZERS = ("sgd", "adam")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    chunk_frames: int = 200
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    lr_decay: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        if self.chunk_frames <= 14:
            raise ConfigError("chunk_frames must exceed the 15-frame receptive field")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")


def speaker_label_map(entries):
    """Map speaker ids to dense indices, sorted for determinism."""
    return {spk: i for i, spk in enumerate(sorted({e.speaker_id for e in entries}))}


def _chunk(features, chunk_frames, rng):
    t = features.shape[0]
    if t >= chunk_frames:
        start = int(rng.integers(0, t - chunk_frames + 1))
        return features[start : start + chunk_frames]
    return np.resize(features, (chunk_frames, features.shape[1]))


def make_batches(entries, cfg, epoch, features=None):
    """Deterministic batch stream for one epoch.

    Yields lists of ``(chunk, label)`` pairs of length ``cfg.batch_size``;
    a final incomplete batch is dropped to keep batch norm well-posed.
    ``features`` may pre-map utterance ids to arrays to avoid re-reading
    files; contents are identical either way.
    """
    if not entries:
        raise ConfigError("empty manifest")
    labels = speaker_label_map(entries)
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(entries))
    batches = []
    for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
        batch = []
        for idx in order[start : start + cfg.batch_size]:
            entry = entries[idx]
            feats = (
                features[entry.utt_id]
                if features is not None
                else corpus_mod.read_features(entry.path)
            )
            batch.append((_chunk(feats, cfg.chunk_frames, rng), labels[entry.speaker_id]))
        batches.append(batch)
    return batches


def init_optimizer(cfg, model):
    if cfg.optimizer == "sgd":
        return {"kind": "sgd"}
    return {
        "kind": "adam",
        "t": 0,
        "m": {name: np.zeros_like(p) for name, p in model.params.items()},
        "v": {name: np.zeros_like(p) for name, p in model.params.items()},
    }


def apply_updates(model, grads, state, learning_rate):
    """Update parameters in place from gradients."""
    if state["kind"] == "sgd":
        for name, g in grads.items():
            model.params[name] -= learning_rate * g
        return
    state["t"] += 1
    t = state["t"]
    for name, g in grads.items():
        m = state["m"][name]
        v = state["v"][name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        model.params[name] -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)


def train_step(model, batch, state, learning_rate):
    """One forward/backward/update on a batch; returns (mean loss, accuracy).

    The optimizer state and the model (parameters plus batch-norm running
    statistics) are updated in place.  A non-finite loss aborts with a
    divergence error.
    """
    seqs = [chunk for chunk, _ in batch]
    labels = np.array([label for _, label in batch])
    try:
        logits, tape = forward_batch(model, seqs, "train")
        losses, d_logits = softmax_cross_entropy_batch(logits, labels)
    except ValueError as exc:
        raise DivergenceError(f"non-finite values in training step: {exc}") from exc
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise DivergenceError(f"training loss is not finite ({loss})")
    grads, _ = backward_batch(model, tape, d_logits / len(batch))
    apply_updates(model, grads, state, learning_rate)
    commit_bn_updates(model, tape)
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    return loss, accuracy


def train(model, entries, cfg, out_dir=None, verbose=False):
    """Run the full training loop; returns (model, log lines).

    Emits one log line per epoch ("epoch=<n> loss=<f> acc=<f>").  When
    ``out_dir`` is given, writes ``model.aspx`` and ``train.log`` there.
    """
    if not entries:
        raise ConfigError("empty manifest")
    num_speakers = len({e.speaker_id for e in entries})
    if num_speakers != model.config.num_speakers:
        raise ConfigError(
            f"manifest has {num_speakers} speakers, model expects "
            f"{model.config.num_speakers}"
        )
    if cfg.chunk_frames <= model.config.context_frames:
        raise ConfigError(
            f"chunk_frames={cfg.chunk_frames} does not exceed the model's "
            f"{model.config.context_frames}-frame context"
        )
    features = {e.utt_id: corpus_mod.read_features(e.path) for e in entries}
    state = init_optimizer(cfg, model)
    log = []
    for epoch in range(cfg.epochs):
        learning_rate = cfg.learning_rate * cfg.lr_decay**epoch
        losses = []
        accuracies = []
        for batch in make_batches(entries, cfg, epoch, features):
            loss, accuracy = train_step(model, batch, state, learning_rate)
            losses.append(loss)
            accuracies.append(accuracy)
        if not losses:
            raise ConfigError(
                f"no full batch of size {cfg.batch_size} from {len(entries)} utterances"
            )
        line = f"epoch={epoch} loss={np.mean(losses):.6f} acc={np.mean(accuracies):.6f}"
        log.append(line)
        if verbose:
            print(line)
    if out_dir is not None:
        out_dir = corpus_mod.ensure_dir(out_dir)
        save_checkpoint(model, out_dir / "model.aspx")
        (out_dir / "train.log").write_text("".join(line + "\n" for line in log))
    return model, log
