"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

LINKS = ("identity", "log", "logit")


class DesignError(ValueError):
    """Malformed model input: missing columns, bad weights, rank deficiency."""


def check_link(link: str) -> str:
    if link not in LINKS:
        raise ValueError(f"link must be one of {LINKS}, got {link!r}")
    return link


def check_response(y, link: str) -> np.ndarray:
    y = check_array(y, ensure_2d=False, dtype=float)
    if y.ndim != 1:
        raise DesignError("response must be one-dimensional")
    if link == "logit" and not np.all((y == 0) | (y == 1)):
        raise DesignError("logit link needs a 0/1 response")
    if link == "log" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise DesignError("log link needs non-negative integer counts")
    return y


def check_design(X) -> np.ndarray:
    X = check_array(X, dtype=float)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DesignError(f"design matrix is rank deficient ({X.shape[1]} columns)")
    return X


def check_groups(groups, n: int) -> tuple[np.ndarray, int]:
    """Integer codes ``0..G-1`` for arbitrary group labels."""
    if groups is None:
        raise DesignError("groups are required for a random-intercept model")
    g = np.asarray(groups)
    if g.ndim != 1 or len(g) != n:
        raise DesignError("groups must be a vector with one label per row")
    _, codes = np.unique(g, return_inverse=True)
    return codes.astype(np.int64), int(codes.max()) + 1 if n else 0


def normalize_weights(weights, n: int) -> np.ndarray:
    """Positive weights rescaled to sum to ``n``."""
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    check_consistent_length(w, np.empty(n))
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        bad = int(np.flatnonzero(~(np.isfinite(w) & (w > 0)))[0])
        raise DesignError(f"weight at row {bad} is not positive")
    return w * (n / w.sum())
