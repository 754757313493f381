"""Threshold calibration, AUROC, score standardization and diagnostics."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from classifier import ClassifierModel, forward_batch
from ood_scores import u1_u2
from taxonomy import SoftLabelMatrix, TaxonomyTree, distance_matrix

logger = logging.getLogger(__name__)

Z_95 = 1.959963984540054
MAX_CALIBRATION_ITERATIONS = 100


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    alpha: float
    iterations: int
    removed: int


@dataclass(frozen=True)
class RankDistanceCurve:
    ranks: np.ndarray
    known_mean: np.ndarray
    known_halfwidth: np.ndarray
    novel_mean: np.ndarray
    novel_halfwidth: np.ndarray

    def rows(self):
        """(population, rank, mean, halfwidth) tuples, known first."""
        for population, means, halves in (
            ("known", self.known_mean, self.known_halfwidth),
            ("novel", self.novel_mean, self.novel_halfwidth),
        ):
            for r, m, h in zip(self.ranks, means, halves):
                yield population, int(r), float(m), float(h)


def auroc(known_scores: Sequence[float], novel_scores: Sequence[float]) -> float:
    """P(novel score > known score), ties counted one half (Mann-Whitney U)."""
    known = np.asarray(known_scores, dtype=np.float64).ravel()
    novel = np.asarray(novel_scores, dtype=np.float64).ravel()
    if known.size == 0 or novel.size == 0:
        raise ValueError("auroc needs nonempty known and novel score lists")
    ranks = rankdata(np.concatenate([novel, known]))
    n1, n0 = novel.size, known.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def nearest_rank_percentile(scores: Sequence[float], q: float) -> float:
    """Smallest value with at least a fraction q of the sample at or below it."""
    ordered = np.sort(np.asarray(scores, dtype=np.float64))
    if ordered.size == 0:
        raise ValueError("percentile of an empty list")
    rank = max(1, math.ceil(q * ordered.size - 1e-9))
    return float(ordered[min(rank, ordered.size) - 1])


def calibrate_threshold(val_scores: Sequence[float], alpha: float) -> CalibrationResult:
    """Iterated (1 - alpha) percentile with removal of exceedances.

    Stops when the set of removed validation samples no longer changes, or
    after MAX_CALIBRATION_ITERATIONS percentile evaluations.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    scores = np.asarray(val_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("calibration needs at least one validation score")

    removed = np.zeros(scores.size, dtype=bool)
    threshold = math.nan
    for iteration in range(1, MAX_CALIBRATION_ITERATIONS + 1):
        kept = scores[~removed]
        if kept.size == 0:
            raise ValueError("calibration removed every validation sample")
        threshold = nearest_rank_percentile(kept, 1.0 - alpha)
        now_removed = scores > threshold
        if np.array_equal(now_removed, removed):
            break
        removed = now_removed
    else:
        logger.warning(f"⚠️ Calibration did not converge in {MAX_CALIBRATION_ITERATIONS} iterations")
        iteration = MAX_CALIBRATION_ITERATIONS

    return CalibrationResult(threshold=threshold, alpha=alpha, iterations=iteration, removed=int(removed.sum()))


def standardization_stats(val_scores: Sequence[float]) -> Tuple[float, float]:
    scores = np.asarray(val_scores, dtype=np.float64)
    if scores.size < 2:
        raise ValueError("standardization needs at least two validation scores")
    return float(scores.mean()), float(scores.std(ddof=1))


def standardize_scores(scores: Sequence[float], val_mean: float, val_std: float) -> np.ndarray:
    if not val_std > 0:
        raise ValueError(f"standard deviation must be > 0, got {val_std}")
    return (np.asarray(scores, dtype=np.float64) - val_mean) / val_std


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and 95% normal-approximation half-width."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(Z_95 * v.std(ddof=1) / math.sqrt(v.size))


def box_stats(values: Sequence[float]) -> Dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"n": 0, "min": math.nan, "q1": math.nan, "median": math.nan, "q3": math.nan, "max": math.nan}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "min": float(v.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v.max())}


def _rank_distances(probs: np.ndarray, D: np.ndarray) -> np.ndarray:
    """N x (K-1) distances from the rank-r class to the top class, r = 2..K."""
    order = np.argsort(-probs, axis=1, kind="stable")
    top = order[:, :1]
    return D[top, order[:, 1:]]


def rank_distance_curve_from_probs(known_probs: np.ndarray, novel_probs: Optional[np.ndarray],
                                   tree: TaxonomyTree) -> RankDistanceCurve:
    K = tree.num_classes
    if K < 2:
        raise ValueError("rank-distance curve needs at least 2 classes")
    D = distance_matrix(tree)
    known_probs = np.atleast_2d(np.asarray(known_probs, dtype=np.float64))
    if known_probs.shape[1] != K:
        raise ValueError(f"probabilities have {known_probs.shape[1]} classes, taxonomy has {K}")

    def per_rank(probs):
        if probs is None or len(probs) == 0:
            nan = np.full(K - 1, math.nan)
            return nan, nan.copy()
        dist = _rank_distances(np.atleast_2d(probs), D)
        stats = [summarize(dist[:, r]) for r in range(K - 1)]
        return np.array([s[0] for s in stats]), np.array([s[1] for s in stats])

    km, kh = per_rank(known_probs)
    nm, nh = per_rank(novel_probs)
    return RankDistanceCurve(ranks=np.arange(2, K + 1), known_mean=km, known_halfwidth=kh,
                             novel_mean=nm, novel_halfwidth=nh)


def rank_distance_curve(model: ClassifierModel, known_ds, novel_ds, tree: TaxonomyTree) -> RankDistanceCurve:
    """Mean taxonomy distance between the top prediction and the rank-r prediction."""
    _, _, known_probs = forward_batch(model, known_ds.features)
    novel_probs = None
    if novel_ds is not None:
        _, _, novel_probs = forward_batch(model, novel_ds.features)
    return rank_distance_curve_from_probs(known_probs, novel_probs, tree)


def u1u2_summary(model: ClassifierModel, known_X: np.ndarray, novel_X: np.ndarray,
                 T: float, soft: SoftLabelMatrix) -> Dict[str, Dict[str, float]]:
    """Mean and 95% half-width of U1 and U2 for the known and novel populations."""
    out = {}
    for population, X in (("known", known_X), ("novel", novel_X)):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError(f"{population} sample set is empty")
        terms = np.array([u1_u2(model, x, T, soft) for x in X])
        u1_mean, u1_half = summarize(terms[:, 0])
        u2_mean, u2_half = summarize(terms[:, 1])
        out[population] = {"u1_mean": u1_mean, "u1_halfwidth": u1_half,
                           "u2_mean": u2_mean, "u2_halfwidth": u2_half, "n": int(X.shape[0])}
    return out
