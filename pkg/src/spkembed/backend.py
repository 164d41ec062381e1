"""Embedding post-processing and trial scoring.

The backend transform centers embeddings on the fitting population's mean,
whitens them with an eigenvalue-floored inverse square root of the sample
covariance, and scales each vector to unit Euclidean norm.  Scoring uses a
two-covariance PLDA model (full-rank speaker space, so the speaker-space
dimension equals the embedding dimension) fitted by EM, or plain cosine
similarity as a diagnostic.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .container import read_container, write_container
from .errors import (
    DegenerateEmbeddingError,
    DimensionError,
    InsufficientDataError,
)

BACKEND_MAGIC = b"ASPB"

EIGENVALUE_FLOOR = 1e-8


def _floor_spd(matrix, rel_floor):
    """Symmetrize and floor eigenvalues at rel_floor * largest (absolute
    rel_floor when the matrix has collapsed to zero)."""
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    top = float(vals.max())
    floor = rel_floor * top if top > 0 else rel_floor
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T, vals, vecs


@dataclass
class BackendTransform:
    mean: np.ndarray
    whitener: np.ndarray
    eigenvalue_floor: float = EIGENVALUE_FLOOR


def fit_backend_transform(embeddings, eigenvalue_floor=EIGENVALUE_FLOOR):
    """Fit centering and whitening to a population of embeddings.

    The whitener is Lambda^(-1/2) U^T from the eigendecomposition of the
    population covariance, with eigenvalues floored so that collapsed
    directions stay finite.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("need at least 2 embeddings to fit the backend")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    _, vals, vecs = _floor_spd(cov, eigenvalue_floor)
    whitener = (vecs / np.sqrt(vals)).T
    return BackendTransform(mean=mean, whitener=whitener, eigenvalue_floor=eigenvalue_floor)


def apply_backend_transform(transform, embedding):
    """Center, whiten, and length-normalize one embedding to unit norm."""
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != transform.mean.shape:
        raise DimensionError(
            f"embedding has shape {e.shape}, transform expects {transform.mean.shape}"
        )
    y = transform.whitener @ (e - transform.mean)
    norm = np.linalg.norm(y)
    if norm == 0.0:
        raise DegenerateEmbeddingError("embedding is zero after centering and whitening")
    return y / norm


@dataclass
class PldaModel:
    """Two-covariance model: speaker means ~ N(global_mean, between_cov),
    sessions scatter around their speaker mean with within_cov."""

    global_mean: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    loglik_history: Optional[np.ndarray] = None
    _scorer: Optional[tuple] = field(default=None, repr=False, compare=False)


def _speaker_stats(embeddings, labels):
    x = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    if x.ndim != 2 or len(labels) != x.shape[0]:
        raise DimensionError("need one label per embedding row")
    groups = {}
    for row, label in enumerate(labels):
        groups.setdefault(label, []).append(row)
    stats = []
    for label in sorted(groups, key=str):
        rows = x[groups[label]]
        mean = rows.mean(axis=0)
        centered = rows - mean
        stats.append((rows.shape[0], mean, centered.T @ centered))
    return x, stats


def plda_log_likelihood(model, embeddings, labels):
    """Exact marginal log-likelihood of the labeled data under the model."""
    x, stats = _speaker_stats(embeddings, labels)
    d = x.shape[1]
    mu = model.global_mean
    b, w = model.between_cov, model.within_cov
    sign, logdet_w = np.linalg.slogdet(w)
    if sign <= 0:
        raise ValueError("within covariance must be positive definite")
    total = 0.0
    for n, mean, scatter in stats:
        # Marginal of the speaker average, then the within-speaker deviations.
        avg_cov = b + w / n
        sign, logdet_avg = np.linalg.slogdet(avg_cov)
        diff = mean - mu
        total += -0.5 * (d * np.log(2 * np.pi) + logdet_avg + diff @ np.linalg.solve(avg_cov, diff))
        total += -0.5 * (
            (n - 1) * d * np.log(2 * np.pi)
            + (n - 1) * logdet_w
            + np.trace(np.linalg.solve(w, scatter))
        ) + 0.5 * d * np.log(n)
    return float(total)


def plda_fit(embeddings, labels, iters=10, eigenvalue_floor=EIGENVALUE_FLOOR):
    """Fit the two-covariance model by EM on labeled embeddings.

    The global mean is the sample mean and stays fixed; EM alternates between
    Gaussian posteriors over each speaker's latent mean and covariance
    re-estimation.  The within covariance is eigenvalue-floored each
    iteration to stay positive definite.  The fitted model carries the
    per-iteration data log-likelihood in ``loglik_history``.
    """
    x, stats = _speaker_stats(embeddings, labels)
    if len(stats) < 2:
        raise InsufficientDataError("PLDA needs at least 2 speakers")
    if all(n < 2 for n, _, _ in stats):
        raise InsufficientDataError("PLDA needs at least one speaker with 2+ sessions")
    num_sessions = x.shape[0]
    num_speakers = len(stats)
    mu = x.mean(axis=0)

    # Moment initialization: between/within scatters of the labeled data.
    between = sum(np.outer(mean - mu, mean - mu) for _, mean, _ in stats) / num_speakers
    within = sum(scatter for _, _, scatter in stats) / num_sessions
    within, _, _ = _floor_spd(within, eigenvalue_floor)
    between = 0.5 * (between + between.T)

    history = []
    for _ in range(iters):
        new_between = np.zeros_like(between)
        new_within = np.zeros_like(within)
        for n, mean, scatter in stats:
            # Posterior over the speaker mean, via solves against B + W/n so
            # that a collapsed between covariance stays handled.
            avg_cov = between + within / n
            gain = between @ np.linalg.inv(avg_cov)
            post_mean = mu + gain @ (mean - mu)
            post_cov = between - gain @ between
            post_cov = 0.5 * (post_cov + post_cov.T)
            dev = post_mean - mu
            new_between += post_cov + np.outer(dev, dev)
            resid = mean - post_mean
            new_within += scatter + n * (np.outer(resid, resid) + post_cov)
        between = 0.5 * (new_between + new_between.T) / num_speakers
        within, _, _ = _floor_spd(new_within / num_sessions, eigenvalue_floor)
        model = PldaModel(global_mean=mu, between_cov=between, within_cov=within)
        history.append(plda_log_likelihood(model, embeddings, labels))
    model.loglik_history = np.array(history)
    return model


def _plda_scorer(model):
    """Precompute the quadratic-form matrices of the verification LLR."""
    if model._scorer is not None:
        return model._scorer
    b, w = model.between_cov, model.within_cov
    total = b + w
    total_inv = np.linalg.inv(total)
    marginal = total - b @ total_inv @ b  # Schur complement of the joint covariance
    cond_inv = np.linalg.inv(marginal)
    same_quad = total_inv - cond_inv
    cross_quad = cond_inv @ b @ total_inv
    sum_form = 0.5 * ((same_quad + cross_quad) + (same_quad + cross_quad).T)
    diff_form = 0.5 * ((same_quad - cross_quad) + (same_quad - cross_quad).T)
    _, logdet_total = np.linalg.slogdet(total)
    _, logdet_marginal = np.linalg.slogdet(marginal)
    const = 0.5 * (logdet_total - logdet_marginal)
    model._scorer = (sum_form, diff_form, const)
    return model._scorer


def plda_score(model, e1, e2):
    """Same-speaker vs different-speaker log-likelihood ratio.

    Evaluated through quadratic forms in (e1 + e2) and (e1 - e2), which makes
    the score exactly symmetric under swapping the two embeddings.
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != model.global_mean.shape or e2.shape != model.global_mean.shape:
        raise DimensionError("embedding dimensions do not match the PLDA model")
    sum_form, diff_form, const = _plda_scorer(model)
    u = (e1 - model.global_mean) + (e2 - model.global_mean)
    v = (e1 - model.global_mean) - (e2 - model.global_mean)
    return float(0.25 * (u @ sum_form @ u) + 0.25 * (v @ diff_form @ v) + const)


def cosine_score(e1, e2):
    """Inner product over norms, clipped to [-1, 1]."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1 = np.linalg.norm(e1)
    n2 = np.linalg.norm(e2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateEmbeddingError("cosine score of a zero vector")
    return float(np.clip(e1 @ e2 / (n1 * n2), -1.0, 1.0))


def save_backend(path, transform, plda):
    """Write the fitted transform and PLDA model as one container file."""
    arrays = {
        "transform.mean": transform.mean,
        "transform.whitener": transform.whitener,
        "plda.global_mean": plda.global_mean,
        "plda.between_cov": plda.between_cov,
        "plda.within_cov": plda.within_cov,
    }
    meta = {"kind": "backend", "eigenvalue_floor": transform.eigenvalue_floor}
    write_container(path, BACKEND_MAGIC, meta, arrays)


def load_backend(path):
    meta, arrays = read_container(path, BACKEND_MAGIC)
    transform = BackendTransform(
        mean=arrays["transform.mean"],
        whitener=arrays["transform.whitener"],
        eigenvalue_floor=meta["eigenvalue_floor"],
    )
    plda = PldaModel(
        global_mean=arrays["plda.global_mean"],
        between_cov=arrays["plda.between_cov"],
        within_cov=arrays["plda.within_cov"],
    )
    return transform, plda
