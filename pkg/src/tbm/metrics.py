"""Evaluation metrics for both tasks."""
import numpy as np

from .errors import ConstantTarget, LengthMismatch, NoLabels


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if len(y) != len(y_hat) or len(y) == 0:
        raise LengthMismatch(f"need equal non-zero lengths, got {len(y)} and {len(y_hat)}")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def r_squared(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ConstantTarget("R^2 is undefined for a constant target")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


def detection_rate(labeled, flagged) -> float:
    """Fraction of labelled anomalous windows that were flagged (recall)."""
    labeled = set(labeled)
    if not labeled:
        raise NoLabels("no labelled anomalies")
    return len(labeled & set(flagged)) / len(labeled)


def false_positive_rate(normal, flagged) -> float:
    normal = set(normal)
    if not normal:
        raise NoLabels("no normal windows")
    return len(normal & set(flagged)) / len(normal)
