"""Detection metrics over labeled trial scores: EER, minDCF, DET points.

All metrics are computed on the empirical miss / false-alarm step functions
swept over every distinct score (plus sentinels below and above all scores),
with the convention that a trial is accepted when score >= threshold.  Only
score order matters, so every metric is invariant under strictly increasing
transforms of the scores.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataReferenceError, InsufficientDataError, ParseError


@dataclass
class ScoreSet:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64)
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64)
        if not (
            np.all(np.isfinite(self.target_scores))
            and np.all(np.isfinite(self.nontarget_scores))
        ):
            raise ValueError("scores must be finite")


@dataclass
class DcfParams:
    p_tar: float
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_tar < 1:
            raise ValueError("p_tar must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


def _check_nonempty(scores):
    if scores.target_scores.size == 0 or scores.nontarget_scores.size == 0:
        raise InsufficientDataError("need both target and nontarget scores")


def _operating_points(scores):
    """P_miss and P_fa at every distinct threshold, ordered by threshold.

    Thresholds run from below every score (accept everything: miss 0, false
    alarm 1) to above every score (reject everything: miss 1, false alarm 0).
    """
    targets = np.sort(scores.target_scores)
    nontargets = np.sort(scores.nontarget_scores)
    distinct = np.unique(np.concatenate([targets, nontargets]))
    thresholds = np.concatenate([[-np.inf], distinct, [np.inf]])
    p_miss = np.searchsorted(targets, thresholds, side="left") / targets.size
    p_fa = 1.0 - np.searchsorted(nontargets, thresholds, side="left") / nontargets.size
    return p_miss, p_fa


def det_points(scores):
    """DET curve operating points as (P_miss, P_fa) pairs.

    P_miss is non-decreasing and P_fa non-increasing along the list, with the
    extreme points (0, 1) and (1, 0) always present.
    """
    _check_nonempty(scores)
    p_miss, p_fa = _operating_points(scores)
    return list(zip(p_miss.tolist(), p_fa.tolist()))


def eer(scores):
    """Equal error rate: where the miss and false-alarm rates cross.

    The step functions are linearly interpolated between the two adjacent
    operating points that bracket the crossing.
    """
    _check_nonempty(scores)
    p_miss, p_fa = _operating_points(scores)
    diff = p_miss - p_fa  # non-decreasing along the sweep
    i = int(np.searchsorted(diff > 0, True))  # first point with miss > fa
    m1, f1 = p_miss[i - 1], p_fa[i - 1]
    m2, f2 = p_miss[i], p_fa[i]
    frac = (f1 - m1) / ((m2 - m1) - (f2 - f1))
    return float(m1 + frac * (m2 - m1))


def min_dcf(scores, params):
    """Minimum of the normalized detection cost over all thresholds.

    cost(t) = c_miss * p_tar * P_miss(t) + c_fa * (1 - p_tar) * P_fa(t),
    normalized by min(c_miss * p_tar, c_fa * (1 - p_tar)) so that the trivial
    accept-all / reject-all policies cost 1.
    """
    _check_nonempty(scores)
    p_miss, p_fa = _operating_points(scores)
    cost = params.c_miss * params.p_tar * p_miss + params.c_fa * (1.0 - params.p_tar) * p_fa
    floor = min(params.c_miss * params.p_tar, params.c_fa * (1.0 - params.p_tar))
    return float(cost.min() / floor)


def write_scores(path, scored_trials):
    """Write "<enroll-id> <test-id> <score>" lines; scores keep full precision."""
    with open(path, "w") as fh:
        for enroll, test, score in scored_trials:
            fh.write(f"{enroll} {test} {score!r}\n")


def read_scores(path):
    """Read scored trials back as (enroll, test, score) tuples."""
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields", lineno)
            try:
                score = float(parts[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad score {parts[2]!r}", lineno) from None
            out.append((parts[0], parts[1], score))
    return out


def score_set_from_trials(scored_trials, key_records):
    """Join scored trials against a labeled key into a ScoreSet.

    Every key record must have a matching score; unmatched records raise a
    data-reference error listing the missing pairs.
    """
    by_pair = {(enroll, test): score for enroll, test, score in scored_trials}
    targets = []
    nontargets = []
    missing = []
    for record in key_records:
        pair = (",".join(record.enroll_ids), record.test_id)
        if pair not in by_pair:
            missing.append(f"{pair[0]}-{pair[1]}")
            continue
        (targets if record.is_target else nontargets).append(by_pair[pair])
    if missing:
        raise DataReferenceError(
            f"{len(missing)} key trials have no score", missing_ids=missing
        )
    return ScoreSet(np.array(targets), np.array(nontargets))
