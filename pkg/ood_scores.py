"""Novelty scores. Every score follows the same convention: higher means
more anomalous, and a sample is flagged when its score exceeds c."""
import csv
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from classifier import (
    ClassifierModel,
    PROB_FLOOR,
    _check_simplex,
    forward_batch,
    log_prob_jacobian,
    safe_log,
    softmax_T,
)
from taxonomy import SoftLabelMatrix
from utils import format_float

logger = logging.getLogger(__name__)

METHODS = ("msp", "odin", "dmd")
VARIANTS = ("flat", "hier")
SCORE_DUMP_COLUMNS = ("sample_id", "method", "variant", "beta", "score", "predicted_leaf", "is_novel", "split")


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: int
    method: str
    variant: str
    score: float
    predicted_leaf: str
    beta: Optional[float] = None
    is_novel: bool = False
    split: str = "test"

    def __post_init__(self):
        if self.method not in METHODS or self.variant not in VARIANTS:
            raise ValueError(f"unknown detector {self.variant}/{self.method}")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for sample {self.sample_id}")


@dataclass(frozen=True)
class GaussianBank:
    means: np.ndarray          # C x H
    covariance: np.ndarray     # H x H, unregularized
    precision: np.ndarray      # inverse of covariance + ridge * I
    ridge: float
    classes: Tuple[int, ...]
    label_mode: str = "true"

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_moments(cls, means: np.ndarray, covariance: np.ndarray, ridge: float = 0.0,
                     classes: Optional[Iterable[int]] = None, label_mode: str = "true") -> "GaussianBank":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        covariance = np.asarray(covariance, dtype=np.float64)
        H = means.shape[1]
        if covariance.shape != (H, H):
            raise ValueError(f"covariance must be {H} x {H}")
        regularized = covariance + ridge * np.eye(H)
        try:
            factor = cho_factor(regularized, lower=True)
        except np.linalg.LinAlgError as e:
            raise ValueError("regularized covariance is not positive definite") from e
        precision = cho_solve(factor, np.eye(H))
        precision = 0.5 * (precision + precision.T)
        return cls(
            means=means,
            covariance=covariance,
            precision=precision,
            ridge=float(ridge),
            classes=tuple(range(means.shape[0])) if classes is None else tuple(int(c) for c in classes),
            label_mode=label_mode,
        )

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "bank_means": self.means,
            "bank_covariance": self.covariance,
            "bank_ridge": np.array(self.ridge),
            "bank_classes": np.array(self.classes, dtype=np.int64),
            "bank_label_mode": np.array(self.label_mode),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "GaussianBank":
        return cls.from_moments(
            arrays["bank_means"],
            arrays["bank_covariance"],
            ridge=float(arrays["bank_ridge"]),
            classes=arrays["bank_classes"].tolist(),
            label_mode=str(arrays["bank_label_mode"]),
        )


def msp_score(probs: np.ndarray) -> float:
    """Negative maximum softmax probability."""
    return float(-np.max(_check_simplex(probs, "probs")))


def msp_scores(probs: np.ndarray) -> np.ndarray:
    return -np.max(np.asarray(probs, dtype=np.float64), axis=1)


def _hier_nll(probs: np.ndarray, weights: np.ndarray) -> float:
    return float(-np.sum(weights * safe_log(probs, weights)))


def hier_score(probs: np.ndarray, soft: SoftLabelMatrix) -> float:
    """Soft-label weighted negative log-likelihood around the predicted leaf."""
    probs = _check_simplex(probs, "probs")
    if probs.shape[0] != soft.num_classes:
        raise ValueError(f"probs has {probs.shape[0]} classes, soft labels have {soft.num_classes}")
    y_hat = int(np.argmax(probs))
    return _hier_nll(probs, soft.row(y_hat))


def hier_scores(probs: np.ndarray, soft: SoftLabelMatrix) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    weights = soft.values[np.argmax(probs, axis=1)]
    return -np.sum(weights * safe_log(probs, weights), axis=1)


def odin_perturb(model: ClassifierModel, x: np.ndarray, T: float, epsilon: float) -> np.ndarray:
    """Step of size epsilon that raises log f_yhat(x; T) under the sign of its gradient."""
    if not T > 0:
        raise ValueError("temperature must be > 0")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    _, logits, _ = forward_batch(model, x[None, :])
    y_hat = int(np.argmax(logits[0]))
    grad = log_prob_jacobian(model, x, T)[y_hat]
    return x - epsilon * np.sign(-grad)


def odin_score(model: ClassifierModel, x: np.ndarray, T: float, epsilon: float,
               variant: str = "flat", soft: Optional[SoftLabelMatrix] = None) -> float:
    """ODIN score; the hier variant keeps the label predicted on the clean input."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant}")
    if variant == "hier" and soft is None:
        raise ValueError("the hier variant needs a soft-label matrix")
    x = np.asarray(x, dtype=np.float64)
    x_tilde = odin_perturb(model, x, T, epsilon)
    _, logits_tilde, _ = forward_batch(model, x_tilde[None, :])
    probs = softmax_T(logits_tilde[0], T)
    if variant == "flat":
        return float(-np.max(probs))
    _, logits, _ = forward_batch(model, x[None, :])
    y_hat = int(np.argmax(logits[0]))
    return _hier_nll(probs, soft.row(y_hat))


def odin_scores(model: ClassifierModel, X: np.ndarray, T: float, epsilon: float,
                variant: str = "flat", soft: Optional[SoftLabelMatrix] = None) -> np.ndarray:
    return np.array([odin_score(model, x, T, epsilon, variant, soft) for x in np.asarray(X)])


def dmd_fit(features: np.ndarray, labels: np.ndarray, num_classes: int,
            label_mode: str = "true", ridge: Optional[float] = None,
            skip_empty: bool = False) -> GaussianBank:
    """Class means and tied covariance of penultimate features.

    The ridge defaults to 1e-6 * trace / H (floored at 1e-12 so a zero
    covariance still yields finite distances). Rows are summed in a canonical
    order, so the fit does not depend on sample order.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[1] == 0:
        raise ValueError("features must be an N x H matrix with H >= 1")
    N, H = features.shape
    if N <= H:
        logger.warning(f"⚠️ Fitting a {H}-dim covariance on only {N} samples")

    classes, means, centered = [], [], []
    for k in range(num_classes):
        rows = features[labels == k]
        if rows.shape[0] == 0:
            if skip_empty:
                logger.warning(f"⚠️ Class {k} has no samples, left out of the Gaussian bank")
                continue
            raise ValueError(f"class {k} has no samples")
        rows = rows[np.lexsort(rows.T[::-1])]
        mu = rows.sum(axis=0) / rows.shape[0]
        classes.append(k)
        means.append(mu)
        centered.append(rows - mu)
    if not classes:
        raise ValueError("no class has samples")

    diffs = np.vstack(centered)
    covariance = diffs.T @ diffs / diffs.shape[0]
    covariance = 0.5 * (covariance + covariance.T)
    if ridge is None:
        ridge = max(1e-6 * np.trace(covariance) / H, 1e-12)
    return GaussianBank.from_moments(np.vstack(means), covariance, ridge=ridge,
                                     classes=classes, label_mode=label_mode)


def dmd_scores(bank: GaussianBank, G: np.ndarray) -> np.ndarray:
    """Minimum squared Mahalanobis distance to any class mean, per row."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if G.shape[1] != bank.feature_dim:
        raise ValueError(f"expected {bank.feature_dim}-dim features, got {G.shape[1]}")
    diff = G[:, None, :] - bank.means[None, :, :]
    dist = np.einsum("nch,hj,ncj->nc", diff, bank.precision, diff)
    return dist.min(axis=1)


def dmd_score(bank: GaussianBank, g: np.ndarray) -> float:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ValueError("dmd_score expects a single feature vector")
    return float(dmd_scores(bank, g)[0])


def u1_u2(model: ClassifierModel, x: np.ndarray, T: float, soft: SoftLabelMatrix) -> Tuple[float, float]:
    """First-order terms of the perturbed hierarchical score.

    score(x_tilde) = score(x) + epsilon * (U1 + U2) + O(epsilon^2), with
    U1 the predicted-label term and U2 the contribution of the other leaves.
    """
    J = log_prob_jacobian(model, x, T)
    _, logits, _ = forward_batch(model, np.asarray(x, dtype=np.float64)[None, :])
    y_hat = int(np.argmax(logits[0]))
    weights = soft.row(y_hat)
    direction = np.sign(J[y_hat])
    u1 = -weights[y_hat] * np.abs(J[y_hat]).sum()
    others = np.arange(soft.num_classes) != y_hat
    u2 = -np.sum(weights[others] * (J[others] @ direction))
    return float(u1), float(u2)


def u2_lower_bound(model: ClassifierModel, x: np.ndarray, T: float, soft: SoftLabelMatrix) -> float:
    J = log_prob_jacobian(model, x, T)
    _, logits, _ = forward_batch(model, np.asarray(x, dtype=np.float64)[None, :])
    y_hat = int(np.argmax(logits[0]))
    weights = soft.row(y_hat)
    others = np.arange(soft.num_classes) != y_hat
    return float(-np.sum(weights[others] * np.abs(J[others]).sum(axis=1)))


def compute_scores(model: ClassifierModel, X: np.ndarray, method: str, variant: str,
                   soft: Optional[SoftLabelMatrix] = None, bank: Optional[GaussianBank] = None,
                   temperature: float = 1000.0, epsilon: float = 0.0012) -> Tuple[np.ndarray, np.ndarray]:
    """Scores and predicted class indices for a batch under one detector."""
    if method not in METHODS or variant not in VARIANTS:
        raise ValueError(f"unknown detector {variant}/{method}")
    if variant == "hier" and method != "dmd" and soft is None:
        raise ValueError("hierarchical scoring needs a soft-label matrix")
    penultimate, logits, probs = forward_batch(model, X)
    predicted = np.argmax(logits, axis=1)
    if method == "msp":
        scores = msp_scores(probs) if variant == "flat" else hier_scores(probs, soft)
    elif method == "odin":
        scores = odin_scores(model, X, temperature, epsilon, variant, soft)
    else:
        if bank is None:
            raise ValueError("the dmd detector needs a fitted Gaussian bank")
        scores = dmd_scores(bank, penultimate)
    return scores, predicted


def score_dataset(model: ClassifierModel, ds, method: str, variant: str,
                  soft: Optional[SoftLabelMatrix] = None, bank: Optional[GaussianBank] = None,
                  temperature: float = 1000.0, epsilon: float = 0.0012,
                  is_novel: bool = False, split: str = "test",
                  leaf_names: Optional[Tuple[str, ...]] = None) -> List[ScoreRecord]:
    """Score every sample of ``ds``; predicted leaves are named in ``leaf_names``."""
    names = leaf_names or ds.tree.leaf_names
    scores, predicted = compute_scores(model, ds.features, method, variant, soft, bank, temperature, epsilon)
    beta = soft.beta if (variant == "hier" and soft is not None) else None
    return [
        ScoreRecord(
            sample_id=int(sid), method=method, variant=variant, score=float(s),
            predicted_leaf=names[int(p)], beta=beta, is_novel=is_novel, split=split,
        )
        for sid, s, p in zip(ds.sample_ids, scores, predicted)
    ]


def write_score_dump(records: Iterable[ScoreRecord], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_DUMP_COLUMNS)
        for r in records:
            writer.writerow([
                r.sample_id, r.method, r.variant,
                "" if r.beta is None else format_float(r.beta),
                format_float(r.score), r.predicted_leaf, int(r.is_novel), r.split,
            ])


def read_score_dump(path: str) -> List[ScoreRecord]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(SCORE_DUMP_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(sorted(missing))}")
        return [
            ScoreRecord(
                sample_id=int(row["sample_id"]), method=row["method"], variant=row["variant"],
                score=float(row["score"]), predicted_leaf=row["predicted_leaf"],
                beta=float(row["beta"]) if row["beta"] else None,
                is_novel=row["is_novel"] == "1", split=row["split"],
            )
            for row in reader
        ]
