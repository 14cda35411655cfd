"""
Bag-level classification metrics.
"""

import logging
from typing import Sequence, Union

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, roc_auc_score

from .errors import MetricError, ShapeMismatchError
from .models.results import EvaluationMetrics

logger = logging.getLogger(__name__)

Scores = Union[Sequence[float], Sequence[Sequence[float]], np.ndarray]


def _score_matrix(scores: Scores, count: int) -> np.ndarray:
    """(n, C) scores; a 1-D vector is the positive-class score of a binary task."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = np.stack([1.0 - scores, scores], axis=1)
    if scores.ndim != 2 or scores.shape[0] != count:
        raise ShapeMismatchError("metric scores", scores.shape, (count, "C"))
    return scores


def pairwise_auc(positive: np.ndarray, negative: np.ndarray) -> float:
    """Fraction of (positive, negative) pairs ordered correctly; ties count half."""
    positive = np.asarray(positive, dtype=np.float64).reshape(-1)
    negative = np.asarray(negative, dtype=np.float64).reshape(-1)
    if positive.size == 0 or negative.size == 0:
        raise MetricError("AUC needs at least one positive and one negative score")
    truth = np.concatenate([np.ones(positive.size), np.zeros(negative.size)])
    return float(roc_auc_score(truth, np.concatenate([positive, negative])))


def micro_auc(labels: Sequence[int], scores: Scores) -> float:
    """
    Micro-averaged one-vs-rest AUC.

    Every (bag, class) cell becomes one binary decision: positive when the
    class is the bag's label.

    Args:
        labels: Integer class per bag
        scores: (n, C) class scores, or a 1-D positive-class score

    Returns:
        AUC in [0, 1]

    Raises:
        MetricError: Fewer than two classes present in ``labels``
    """
    labels = np.asarray(labels, dtype=int)
    if np.unique(labels).size < 2:
        raise MetricError(f"AUC is undefined for a single-class split (labels={sorted(set(labels.tolist()))})")
    matrix = _score_matrix(scores, labels.size)
    if labels.max() >= matrix.shape[1]:
        raise ShapeMismatchError("micro_auc labels vs classes", (int(labels.max()) + 1,), matrix.shape)
    one_hot = np.eye(matrix.shape[1], dtype=int)[labels]
    return float(roc_auc_score(one_hot, matrix, average="micro"))


def macro_f1(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support or predictions scores 0."""
    return float(
        f1_score(
            np.asarray(labels, dtype=int),
            np.asarray(predictions, dtype=int),
            labels=list(range(num_classes)),
            average="macro",
            zero_division=0,
        )
    )


def accuracy(labels: Sequence[int], predictions: Sequence[int]) -> float:
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise MetricError("Accuracy is undefined for an empty split")
    return float(accuracy_score(labels, np.asarray(predictions, dtype=int)))


def classification_metrics(labels: Sequence[int], scores: Scores) -> EvaluationMetrics:
    """Micro-AUC, macro-F1 and accuracy from class scores (prediction = argmax)."""
    labels = np.asarray(labels, dtype=int)
    matrix = _score_matrix(scores, labels.size)
    predictions = np.argmax(matrix, axis=1)
    metrics = EvaluationMetrics(
        auc=micro_auc(labels, matrix),
        f1=macro_f1(labels, predictions, matrix.shape[1]),
        accuracy=accuracy(labels, predictions),
        count=int(labels.size),
    )
    logger.debug(f"Metrics over {metrics.count} bags: {metrics.to_dict()}")
    return metrics
