"""RDS design weights: RDS-II and successive sampling (SS)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.isotonic import IsotonicRegression
from sklearn.utils.validation import check_is_fitted

KINDS = ("unweighted", "rds2", "ss")
SIZE_VARIANTS = ("true", "under", "over")


@dataclass(frozen=True)
class WeightScheme:
    kind: str = "unweighted"
    population_size: str = "true"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.population_size not in SIZE_VARIANTS:
            raise ValueError(f"population_size must be one of {SIZE_VARIANTS}")

    @classmethod
    def parse(cls, label: str) -> WeightScheme:
        """``none|1|unweighted``, ``rds2``, ``ss``, ``ss_under``, ``ss_over``."""
        label = label.strip().lower()
        table = {"none": ("unweighted", "true"), "1": ("unweighted", "true"),
                 "unweighted": ("unweighted", "true"), "rds2": ("rds2", "true"),
                 "ss": ("ss", "true"), "ss_true": ("ss", "true"),
                 "ss_under": ("ss", "under"), "ss_over": ("ss", "over")}
        if label not in table:
            raise ValueError(f"unknown weight scheme {label!r}")
        return cls(*table[label])

    @property
    def label(self) -> str:
        if self.kind == "ss":
            return "ss" if self.population_size == "true" else f"ss_{self.population_size}"
        return self.kind

    def assumed_size(self, true_n: int, n: int) -> int:
        """``N``, ``N - (N - n)/2`` or ``N + (N - n)/2``."""
        if self.population_size == "true":
            return int(true_n)
        half = (true_n - n) / 2
        return int(round(true_n - half if self.population_size == "under" else true_n + half))


@dataclass(frozen=True)
class WeightVector:
    pi_hat: np.ndarray
    weight: np.ndarray = field(init=False)
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        pi = np.asarray(self.pi_hat, dtype=float)
        if np.any(~np.isfinite(pi)) or np.any(pi <= 0):
            raise ValueError("inclusion probabilities must be positive and finite")
        object.__setattr__(self, "pi_hat", pi)
        object.__setattr__(self, "weight", 1.0 / pi)


def _check_degrees(degrees) -> np.ndarray:
    d = np.asarray(degrees, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("degrees must be a nonempty vector")
    bad = np.flatnonzero(d < 1)
    if bad.size:
        raise ValueError(f"recruit at position {bad[0]} has degree {d[bad[0]]:g}; RDS weights need degree >= 1")
    return d


def rds2_weights(degrees) -> WeightVector:
    """RDS-II: ``pi_i = mean(d) / d_i``, so ``w_i = d_i / mean(d)``.

    Relative rather than true probabilities; values above 1 are kept.
    """
    d = _check_degrees(degrees)
    return WeightVector(d.mean() / d)


def _allocate_population(deg_values, sample_counts, mass, big_n) -> np.ndarray:
    """Integer class sizes summing to ``big_n`` with ``N_k >= n_k``, proportional to ``mass``."""
    n = int(sample_counts.sum())
    target = mass / mass.sum() * big_n
    extra_raw = np.maximum(target - sample_counts, 0.0)
    spare = big_n - n
    if spare == 0 or extra_raw.sum() == 0:
        extra = np.zeros_like(sample_counts)
        if spare:
            extra_raw = sample_counts.astype(float)
    if spare and extra_raw.sum() > 0:
        share = extra_raw / extra_raw.sum() * spare
        extra = np.floor(share).astype(np.int64)
        left = spare - int(extra.sum())
        if left:
            order = np.lexsort((-deg_values, -(share - extra)))
            extra[order[:left]] += 1
    return sample_counts + extra


def ss_inclusion(pop_degrees, n: int, draws: int, rng: np.random.Generator | None = None,
                 clocks: np.ndarray | None = None) -> np.ndarray:
    """Monte Carlo inclusion probability of every unit under successive sampling.

    Sampling ``n`` units sequentially with probability proportional to degree
    without replacement is equivalent to keeping the ``n`` smallest
    ``E_k / d_k`` for i.i.d. standard exponential ``E_k``.
    """
    d = np.asarray(pop_degrees, dtype=float)
    big_n = d.size
    if n >= big_n:
        return np.ones(big_n)
    if clocks is None:
        clocks = rng.standard_exponential((draws, big_n))
    keys = clocks[:, :big_n] / d
    part = np.argpartition(keys, n - 1, axis=1)[:, :n]
    counts = np.bincount(part.ravel(), minlength=big_n)
    return counts / clocks.shape[0]


def ss_weights(degrees, assumed_n: int, draws: int = 2000, tol: float = 1e-4, max_iter: int = 25,
               rng: np.random.Generator | None = None) -> WeightVector:
    """Successive-sampling weights by fixed-point iteration.

    Start from size-proportional probabilities; estimate the population degree composition by
    inverse-probability weighting the sample; re-estimate each degree's
    inclusion probability by simulating successive samples of size ``n`` from
    that population.  Exponential clocks are shared across iterations, so the
    map is deterministic and the iteration can settle exactly.
    """
    d = _check_degrees(degrees)
    n = d.size
    assumed_n = int(assumed_n)
    if assumed_n < n:
        raise ValueError(f"assumed population size {assumed_n} is smaller than the sample size {n}")
    if assumed_n == n:
        return WeightVector(np.ones(n), converged=True, iterations=0)
    rng = np.random.default_rng() if rng is None else rng
    values, inverse, counts = np.unique(d, return_inverse=True, return_counts=True)
    clocks = rng.standard_exponential((draws, assumed_n))
    # size-proportional start: pi(d) = n d / (N mean(d))
    pi_class = np.clip(values * n / (assumed_n * d.mean()), 1e-12, 1.0)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mass = counts / pi_class
        sizes = _allocate_population(values, counts, mass, assumed_n)
        pop = np.repeat(values, sizes)
        incl = ss_inclusion(pop, n, draws, clocks=clocks)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        new = np.array([incl[bounds[k]:bounds[k + 1]].mean() for k in range(len(values))])
        # inclusion is nondecreasing in degree; pool Monte Carlo noise that breaks the order
        new = IsotonicRegression().fit_transform(values, new, sample_weight=sizes)
        new = np.clip(new, 1.0 / (draws * assumed_n), 1.0)
        delta = np.max(np.abs(new - pi_class))
        pi_class = new
        if delta < tol:
            converged = True
            break
    return WeightVector(pi_class[inverse], converged=converged, iterations=it)


def apply_scheme(degrees, scheme: WeightScheme, true_n: int, rng: np.random.Generator | None = None,
                 draws: int = 2000, min_degree: int | None = None) -> WeightVector:
    """Weights for a sample under ``scheme``.

    ``min_degree`` raises smaller reported degrees before weighting (an
    isolated seed reports at least one tie); leave ``None`` to reject them.
    """
    d = np.asarray(degrees, dtype=float)
    if min_degree is not None:
        d = np.maximum(d, min_degree)
    n = d.size
    if scheme.kind == "unweighted":
        return WeightVector(np.ones(n))
    if scheme.kind == "rds2":
        return rds2_weights(d)
    size = max(scheme.assumed_size(true_n, n), n)
    return ss_weights(d, size, draws=draws, rng=rng)


class DesignWeights(TransformerMixin, BaseEstimator):
    """Transformer from a degree column to design weights.

    ``fit`` stores the inclusion probabilities of the training sample;
    ``transform`` returns them as a weight column (``1 / pi``).
    """

    def __init__(self, scheme="unweighted", population_size=None, draws=2000, random_state=None):
        self.scheme = scheme
        self.population_size = population_size
        self.draws = draws
        self.random_state = random_state

    def fit(self, X, y=None):
        d = np.asarray(X, dtype=float).reshape(len(X), -1)[:, 0]
        scheme = WeightScheme.parse(self.scheme) if isinstance(self.scheme, str) else self.scheme
        if scheme.kind == "ss" and self.population_size is None:
            raise ValueError("successive-sampling weights need population_size")
        wv = apply_scheme(d, scheme, self.population_size or len(d),
                          rng=np.random.default_rng(self.random_state), draws=self.draws)
        self.pi_hat_ = wv.pi_hat
        self.converged_ = wv.converged
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "pi_hat_")
        if len(X) != len(self.pi_hat_):
            raise ValueError("transform expects the sample the weights were fitted on")
        return (1.0 / self.pi_hat_).reshape(-1, 1)
