"""Monte Carlo summary metrics and the Mann-Whitney U test."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import stats


class RelativeBias(NamedTuple):
    value: float
    absolute_fallback: bool


def metric_relative_bias(estimates, truth: float) -> RelativeBias:
    """``(mean(estimates) - truth) / truth``; plain bias when ``truth == 0``."""
    est = np.asarray(estimates, dtype=float)
    if truth == 0:
        return RelativeBias(float(est.mean()), True)
    return RelativeBias(float((est.mean() - truth) / truth), False)


def rmse(estimates, truth: float) -> float:
    est = np.asarray(estimates, dtype=float)
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def coverage(intervals, truth: float) -> float:
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    return float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1])))


def coverage_mcse(p: float, r: int) -> float:
    """Monte Carlo half-width ``sqrt(p (1 - p) / R)``."""
    return math.sqrt(p * (1 - p) / r) if r > 0 else float("nan")


def variance_relative_bias(estimated_variances, estimates) -> float:
    """``(mean estimated variance - empirical variance) / empirical variance``."""
    emp = float(np.var(np.asarray(estimates, dtype=float), ddof=1))
    return float((np.mean(estimated_variances) - emp) / emp)


class MannWhitney(NamedTuple):
    U: float
    p: float
    exact: bool


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    diff = a[:, None] - b[None, :]
    return float((diff > 0).sum() + 0.5 * (diff == 0).sum())


def _exact_rank_sum_counts(doubled_ranks: np.ndarray, k: int) -> np.ndarray:
    """Number of ``k``-subsets of items achieving each doubled rank sum."""
    total = int(doubled_ranks.sum())
    ways = np.zeros((k + 1, total + 1))
    ways[0, 0] = 1.0
    for r in doubled_ranks.astype(np.int64):
        # iterate subset sizes downwards so each item is used at most once
        for j in range(min(k, len(doubled_ranks)), 0, -1):
            ways[j, r:] += ways[j - 1, :total + 1 - r]
    return ways[k]


def mann_whitney_u(group_a, group_b, exact_max: int = 20) -> MannWhitney:
    """Two-sided Mann-Whitney U test of ``group_a`` against ``group_b``.

    ``U`` counts pairs with ``a > b`` (ties count one half).  The p-value is
    exact, from the permutation distribution of mid-rank sums, when the
    smaller group has at most ``exact_max`` members; otherwise it uses the
    tie-corrected normal approximation with continuity correction.
    """
    a = np.asarray(group_a, dtype=float).ravel()
    b = np.asarray(group_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    na, nb = a.size, b.size
    u = _u_statistic(a, b)
    pooled = np.concatenate([a, b])
    ranks = stats.rankdata(pooled)
    n = na + nb
    if min(na, nb) <= exact_max:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_rank_sum_counts(doubled, na)
        sums = np.arange(len(counts))
        # U = R_a - na(na+1)/2, on the doubled scale
        u_vals = (sums - na * (na + 1)) / 2.0
        mask = counts > 0
        u_vals, probs = u_vals[mask], counts[mask] / counts[mask].sum()
        tol = 1e-9
        lower = probs[u_vals <= u + tol].sum()
        upper = probs[u_vals >= u - tol].sum()
        return MannWhitney(u, float(min(1.0, 2 * min(lower, upper))), True)
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float((tie_counts ** 3 - tie_counts).sum()) / (n * (n - 1))
    var = na * nb / 12.0 * ((n + 1) - tie_term)
    mean = na * nb / 2.0
    if var <= 0:
        return MannWhitney(u, 1.0, False)
    z = (abs(u - mean) - 0.5) / math.sqrt(var)
    return MannWhitney(u, float(min(1.0, 2 * stats.norm.sf(max(z, 0.0)))), False)
