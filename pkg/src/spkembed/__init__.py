"""Speaker-embedding toolkit.

A self-contained numpy implementation of an x-vector-style speaker
verification stack: a TDNN frame-level network, four selectable pooling
layers (average, statistics, attentive average, attentive statistics),
an utterance-level classifier head with exact hand-derived gradients,
a whitening + PLDA scoring backend, and detection metrics (EER, minDCF,
DET points), plus a deterministic synthetic-speaker corpus generator.
"""

from .backend import (
    BackendTransform,
    PldaModel,
    apply_backend_transform,
    cosine_score,
    fit_backend_transform,
    load_backend,
    plda_fit,
    plda_log_likelihood,
    plda_score,
    save_backend,
)
from .corpus import (
    ManifestEntry,
    SynthConfig,
    TrialRecord,
    load_manifest,
    make_trials,
    parse_trials,
    read_features,
    synth_generate,
    write_features,
    write_manifest,
    write_trials,
)
from .errors import (
    ConfigError,
    DataReferenceError,
    DegenerateBatchError,
    DegenerateEmbeddingError,
    DimensionError,
    DivergenceError,
    EmptyInputError,
    FormatError,
    InsufficientDataError,
    ParseError,
    ShortSequenceError,
    SpkembedError,
)
from .layers import (
    AffineParams,
    BatchNormState,
    affine_backward,
    affine_forward,
    batchnorm_backward,
    batchnorm_forward,
    grad_check,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
    tdnn_splice,
    tdnn_splice_backward,
)
from .metrics import DcfParams, ScoreSet, det_points, eer, min_dcf
from .model import (
    Model,
    NetworkConfig,
    build_network,
    extract_embedding,
    forward_batch,
    forward_logits,
    load_checkpoint,
    save_checkpoint,
)
from .pooling import (
    AttentionParams,
    AttentionWeights,
    PooledStats,
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
from .trainer import TrainConfig, make_batches, train, train_step

__version__ = "0.1.0"
