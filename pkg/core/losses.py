# featcal/core/losses.py

import numpy as np
from scipy.special import logsumexp, softmax


def _as_columns(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return scores[:, None] if scores.ndim == 1 else scores


def softmax_columns(scores: np.ndarray) -> np.ndarray:
    """Softmax over classes for K x M score matrices (or a single K vector)."""
    return softmax(np.asarray(scores, dtype=np.float64), axis=0)


def cross_entropy(scores: np.ndarray, labels) -> np.ndarray:
    """Per-sample cross-entropy of K x M scores against integer labels."""
    scores = _as_columns(scores)
    labels = np.atleast_1d(labels)
    lse = logsumexp(scores, axis=0)
    return lse - scores[labels, np.arange(scores.shape[1])]


def cross_entropy_grad(scores: np.ndarray, labels) -> np.ndarray:
    """d CE / d scores per column: softmax(z) - onehot(y)."""
    scores = _as_columns(scores)
    grad = softmax_columns(scores)
    labels = np.atleast_1d(labels)
    grad[labels, np.arange(grad.shape[1])] -= 1.0
    return grad


def top1(scores: np.ndarray) -> np.ndarray:
    # np.argmax breaks ties towards the lowest index
    return np.argmax(_as_columns(scores), axis=0)
