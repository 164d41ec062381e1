"""The three-block embedding network: TDNN trunk, pooling, utterance head.

The trunk splices frames at fixed offsets and applies affine / ReLU / batch
norm per layer; the selectable pooling layer collapses the frame axis; the
utterance head is a stack of affine / ReLU / batch-norm layers feeding a
softmax classifier over training speakers.  Speaker embeddings are read out
as the pre-activation output of the first utterance-level affine.

Forward passes accept a whole minibatch of sequences so that batch-norm
statistics in train mode are taken over all frames (trunk) or all utterances
(head) of the batch.  Checkpoints serialize bit-exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import pooling as pooling_mod
from .container import read_container, write_container
from .errors import ConfigError, DimensionError, ShortSequenceError
from .layers import (
    AffineParams,
    BatchNormState,
    affine_backward,
    affine_forward,
    as_matrix,
    batchnorm_backward,
    batchnorm_forward,
    relu_backward,
    relu_forward,
    tdnn_splice,
    tdnn_splice_backward,
)
from .pooling import AttentionParams, PoolingConfig

CHECKPOINT_MAGIC = b"ASPX"

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

DEFAULT_TDNN_LAYERS = (
    ((-2, -1, 0, 1, 2), 512),
    ((-2, 0, 2), 512),
    ((-3, 0, 3), 512),
    ((0,), 512),
    ((0,), 1500),
)


@dataclass
class NetworkConfig:
    input_dim: int
    num_speakers: int
    tdnn_layers: tuple = DEFAULT_TDNN_LAYERS
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    attention_hidden: int = 64
    utterance_layers: tuple = (512, 512)
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be >= 2")
        if not self.tdnn_layers:
            raise ConfigError("need at least one TDNN layer")
        normalized = []
        for offsets, out_dim in self.tdnn_layers:
            offsets = tuple(int(o) for o in offsets)
            if list(offsets) != sorted(offsets) or len(set(offsets)) != len(offsets):
                raise ConfigError(f"offsets must be strictly increasing, got {offsets}")
            if out_dim < 1:
                raise ConfigError("TDNN output dims must be >= 1")
            normalized.append((offsets, int(out_dim)))
        self.tdnn_layers = tuple(normalized)
        if not isinstance(self.pooling, PoolingConfig):
            raise ConfigError("pooling must be a PoolingConfig")
        if self.attention_hidden < 1:
            raise ConfigError("attention_hidden must be >= 1")
        self.utterance_layers = tuple(int(w) for w in self.utterance_layers)
        if not self.utterance_layers or any(w < 1 for w in self.utterance_layers):
            raise ConfigError("utterance_layers must be a non-empty list of widths")

    @property
    def context_frames(self):
        """Frames consumed by the stacked TDNN contexts (receptive field - 1)."""
        return sum(max(o) - min(o) for o, _ in self.tdnn_layers)

    @property
    def frame_feature_dim(self):
        """Dimension of the frame-level features entering the pooling layer."""
        return self.tdnn_layers[-1][1]

    @property
    def pooled_dim(self):
        return self.pooling.output_dim(self.frame_feature_dim)

    @property
    def embedding_dim(self):
        return self.utterance_layers[0]

    def to_meta(self):
        return {
            "input_dim": self.input_dim,
            "num_speakers": self.num_speakers,
            "tdnn_layers": [[list(o), d] for o, d in self.tdnn_layers],
            "pooling_kind": self.pooling.kind,
            "variance_floor": self.pooling.variance_floor,
            "attention_hidden": self.attention_hidden,
            "utterance_layers": list(self.utterance_layers),
            "seed": self.seed,
        }

    @classmethod
    def from_meta(cls, meta):
        return cls(
            input_dim=meta["input_dim"],
            num_speakers=meta["num_speakers"],
            tdnn_layers=tuple((tuple(o), d) for o, d in meta["tdnn_layers"]),
            pooling=PoolingConfig(meta["pooling_kind"], meta["variance_floor"]),
            attention_hidden=meta["attention_hidden"],
            utterance_layers=tuple(meta["utterance_layers"]),
            seed=meta["seed"],
        )


class Model:
    """Parameter container plus cached per-layer views.

    ``params`` maps dotted names to float64 arrays; optimizers update these
    arrays in place so the cached views stay valid.  ``bn_running`` holds the
    non-trainable running statistics, replaced wholesale when a train-mode
    forward is committed.
    """

    def __init__(self, config, params, bn_running):
        self.config = config
        self.params = params
        self.bn_running = bn_running
        self._affine = {}
        for name in self._affine_names():
            self._affine[name] = AffineParams(
                weight=params[f"{name}.weight"], bias=params[f"{name}.bias"]
            )

    def _affine_names(self):
        names = [f"tdnn{i}" for i in range(len(self.config.tdnn_layers))]
        names += [f"utt{j}" for j in range(len(self.config.utterance_layers))]
        names.append("out")
        return names

    def affine(self, name):
        return self._affine[name]

    def bn_state(self, name):
        running = self.bn_running[name]
        return BatchNormState(
            gamma=self.params[f"{name}.gamma"],
            beta=self.params[f"{name}.beta"],
            running_mean=running["mean"],
            running_var=running["var"],
            momentum=BN_MOMENTUM,
            epsilon=BN_EPSILON,
        )

    def attention_params(self):
        return AttentionParams(
            W=self.params["att.W"],
            b=self.params["att.b"],
            v=self.params["att.v"],
            k=float(self.params["att.k"]),
        )

    def param_names(self):
        return sorted(self.params)

    def copy(self):
        params = {k: v.copy() for k, v in self.params.items()}
        running = {
            k: {"mean": v["mean"].copy(), "var": v["var"].copy()}
            for k, v in self.bn_running.items()
        }
        return Model(self.config, params, running)


def build_network(config):
    """Initialize a model deterministically from ``config.seed``.

    Affine weights draw from a zero-mean normal with std 1/sqrt(fan_in);
    biases start at zero, batch-norm at identity, the attention offset at 0.
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    bn_running = {}

    def add_affine(name, out_dim, in_dim):
        params[f"{name}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(in_dim), (out_dim, in_dim))
        params[f"{name}.bias"] = np.zeros(out_dim)

    def add_bn(name, dim):
        params[f"{name}.gamma"] = np.ones(dim)
        params[f"{name}.beta"] = np.zeros(dim)
        bn_running[name] = {"mean": np.zeros(dim), "var": np.ones(dim)}

    in_dim = config.input_dim
    for i, (offsets, out_dim) in enumerate(config.tdnn_layers):
        add_affine(f"tdnn{i}", out_dim, in_dim * len(offsets))
        add_bn(f"tdnn{i}", out_dim)
        in_dim = out_dim

    if config.pooling.uses_attention:
        d = config.frame_feature_dim
        hidden = config.attention_hidden
        params["att.W"] = rng.normal(0.0, 1.0 / np.sqrt(d), (hidden, d))
        params["att.b"] = np.zeros(hidden)
        params["att.v"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden)
        params["att.k"] = np.zeros(())

    in_dim = config.pooled_dim
    for j, width in enumerate(config.utterance_layers):
        add_affine(f"utt{j}", width, in_dim)
        add_bn(f"utt{j}", width)
        in_dim = width
    add_affine("out", config.num_speakers, in_dim)

    return Model(config, params, bn_running)


def _split_rows(stacked, lengths):
    out = []
    start = 0
    for n in lengths:
        out.append(stacked[start : start + n])
        start += n
    return out


def forward_batch(model, seqs, mode="infer"):
    """Forward a list of sequences; returns (logits (B, num_speakers), tape).

    Train mode takes trunk batch-norm statistics over all (spliced) frames in
    the batch and head statistics over the batch's pooled vectors, recording
    updated running averages in the tape for :func:`commit_bn_updates`.
    """
    cfg = model.config
    if not seqs:
        raise ValueError("forward_batch needs at least one sequence")
    xs = []
    for seq in seqs:
        x = as_matrix(seq, "sequence")
        if x.shape[1] != cfg.input_dim:
            raise DimensionError(
                f"sequence has dim {x.shape[1]}, network expects {cfg.input_dim}"
            )
        if x.shape[0] <= cfg.context_frames:
            raise ShortSequenceError(
                f"sequence of {x.shape[0]} frames is shorter than the "
                f"{cfg.context_frames + 1}-frame receptive field"
            )
        xs.append(x)

    tape = {"mode": mode, "tdnn": [], "utt": [], "new_running": {}}
    lengths = [x.shape[0] for x in xs]
    for i, (offsets, _) in enumerate(cfg.tdnn_layers):
        spliced = [tdnn_splice(x, offsets) for x in xs]
        in_lengths = lengths
        lengths = [s.shape[0] for s in spliced]
        stacked = np.vstack(spliced)
        a_out, a_cache = affine_forward(stacked, model.affine(f"tdnn{i}"))
        r_out, r_cache = relu_forward(a_out)
        b_out, b_cache, new_state = batchnorm_forward(r_out, model.bn_state(f"tdnn{i}"), mode)
        if mode == "train":
            tape["new_running"][f"tdnn{i}"] = {
                "mean": new_state.running_mean,
                "var": new_state.running_var,
            }
        tape["tdnn"].append(
            {
                "offsets": offsets,
                "in_lengths": in_lengths,
                "out_lengths": lengths,
                "affine": a_cache,
                "relu": r_cache,
                "bn": b_cache,
            }
        )
        xs = _split_rows(b_out, lengths)

    attention = model.attention_params() if cfg.pooling.uses_attention else None
    pool_caches = []
    pooled_rows = []
    for x in xs:
        stats, cache = pooling_mod.pool_forward(x, cfg.pooling, attention)
        pooled_rows.append(stats.concatenated)
        pool_caches.append(cache)
    tape["pool"] = pool_caches
    tape["pool_lengths"] = lengths

    h = np.vstack(pooled_rows)
    for j in range(len(cfg.utterance_layers)):
        a_out, a_cache = affine_forward(h, model.affine(f"utt{j}"))
        if j == 0:
            tape["embedding"] = a_out
        r_out, r_cache = relu_forward(a_out)
        b_out, b_cache, new_state = batchnorm_forward(r_out, model.bn_state(f"utt{j}"), mode)
        if mode == "train":
            tape["new_running"][f"utt{j}"] = {
                "mean": new_state.running_mean,
                "var": new_state.running_var,
            }
        tape["utt"].append({"affine": a_cache, "relu": r_cache, "bn": b_cache})
        h = b_out

    logits, out_cache = affine_forward(h, model.affine("out"))
    tape["out"] = out_cache
    return logits, tape


def backward_batch(model, tape, d_logits):
    """Exact gradients of the batched forward; returns (grads, d_seqs).

    ``grads`` maps parameter names to arrays matching ``model.params``;
    ``d_seqs`` holds one gradient per input sequence.
    """
    cfg = model.config
    grads = {}

    d_h, d_w, d_b = affine_backward(np.asarray(d_logits, dtype=np.float64), tape["out"])
    grads["out.weight"] = d_w
    grads["out.bias"] = d_b

    for j in reversed(range(len(cfg.utterance_layers))):
        caches = tape["utt"][j]
        d_h, d_gamma, d_beta = batchnorm_backward(d_h, caches["bn"])
        grads[f"utt{j}.gamma"] = d_gamma
        grads[f"utt{j}.beta"] = d_beta
        d_h = relu_backward(d_h, caches["relu"])
        d_h, d_w, d_b = affine_backward(d_h, caches["affine"])
        grads[f"utt{j}.weight"] = d_w
        grads[f"utt{j}.bias"] = d_b

    d_frames_list = []
    if cfg.pooling.uses_attention:
        att_w = np.zeros_like(model.params["att.W"])
        att_b = np.zeros_like(model.params["att.b"])
        att_v = np.zeros_like(model.params["att.v"])
        att_k = 0.0
    for u, cache in enumerate(tape["pool"]):
        d_frames, att_grads = pooling_mod.pooling_backward(cache, d_h[u])
        d_frames_list.append(d_frames)
        if att_grads is not None:
            att_w += att_grads.W
            att_b += att_grads.b
            att_v += att_grads.v
            att_k += att_grads.k
    if cfg.pooling.uses_attention:
        grads["att.W"] = att_w
        grads["att.b"] = att_b
        grads["att.v"] = att_v
        grads["att.k"] = np.asarray(att_k)

    for i in reversed(range(len(cfg.tdnn_layers))):
        caches = tape["tdnn"][i]
        stacked = np.vstack(d_frames_list)
        d_x, d_gamma, d_beta = batchnorm_backward(stacked, caches["bn"])
        grads[f"tdnn{i}.gamma"] = d_gamma
        grads[f"tdnn{i}.beta"] = d_beta
        d_x = relu_backward(d_x, caches["relu"])
        d_x, d_w, d_b = affine_backward(d_x, caches["affine"])
        grads[f"tdnn{i}.weight"] = d_w
        grads[f"tdnn{i}.bias"] = d_b
        pieces = _split_rows(d_x, caches["out_lengths"])
        d_frames_list = [
            tdnn_splice_backward(piece, t_in, caches["offsets"])
            for piece, t_in in zip(pieces, caches["in_lengths"])
        ]

    return grads, d_frames_list


def commit_bn_updates(model, tape):
    """Install the running statistics recorded by a train-mode forward."""
    for name, running in tape["new_running"].items():
        model.bn_running[name] = running


def forward_logits(model, seq, mode="infer"):
    """Logits for one sequence.  Train mode needs a real batch for the
    utterance-level batch norm, so single-sequence training forwards raise a
    degenerate-batch error; use :func:`forward_batch` for training."""
    logits, tape = forward_batch(model, [seq], mode)
    return logits[0], tape


def extract_embedding(model, seq):
    """Deterministic speaker embedding: the first utterance-level affine's
    pre-activation output, computed in infer mode."""
    _, tape = forward_batch(model, [seq], "infer")
    return tape["embedding"][0].copy()


def save_checkpoint(model, path):
    """Serialize config, parameters, and running statistics; bit-exact."""
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    for name, running in model.bn_running.items():
        arrays[f"running.{name}.mean"] = running["mean"]
        arrays[f"running.{name}.var"] = running["var"]
    write_container(
        path, CHECKPOINT_MAGIC, {"kind": "checkpoint", "config": model.config.to_meta()}, arrays
    )


def load_checkpoint(path):
    meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    config = NetworkConfig.from_meta(meta["config"])
    params = {}
    bn_running = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param.") :]] = arr
        elif name.startswith("running."):
            rest = name[len("running.") :]
            layer, stat = rest.rsplit(".", 1)
            bn_running.setdefault(layer, {})[stat] = arr
    return Model(config, params, bn_running)
