"""Covariates, SAR random effects and outcomes on the full population.

The linear predictor for person ``j`` of cluster ``i`` is::

    eta = b0 + b1 * x + gamma * mean(x over j's neighbours) + delta

with ``delta`` drawn per cluster from ``delta = rho * S delta + u``,
``u ~ N(0, sigma2 I)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
from scipy.optimize import brentq
from scipy.special import expit

from .network import ClusterGraph, PopulationNetwork, spectral_radius

LINKS = ("identity", "log", "logit")


class PreconditionError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DgpParams:
    beta0: float = 0.0
    beta1: float = 2.0
    gamma: float = 1.5
    sigma2: float = 1.0
    rho: float = 0.05
    link: str = "identity"
    noise_var: float = 1.0
    # "spectral": require rho * lambda_max < 1; "invertible": only I - rho S nonsingular
    sar_check: str = "spectral"

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.noise_var < 0:
            raise ValueError("noise_var must be non-negative")
        if self.sar_check not in ("spectral", "invertible"):
            raise ValueError("sar_check must be 'spectral' or 'invertible'")

    def check_network(self, net: PopulationNetwork) -> None:
        if self.sar_check != "spectral" or self.rho == 0:
            return
        for i, c in enumerate(net.clusters):
            lam = spectral_radius(c) if c.n_edges else 0.0
            if abs(self.rho) * lam >= 1.0:
                raise PreconditionError(
                    f"cluster {i}: rho * spectral radius = {abs(self.rho) * lam:.3f} >= 1")


@dataclass(frozen=True)
class CovariateSpec:
    mean: float = 3.0
    sd: float = 1.5
    degree_correlation: float = 0.0

    def __post_init__(self):
        if self.sd <= 0:
            raise ValueError("sd must be positive")
        if not 0.0 <= self.degree_correlation < 1.0:
            raise ValueError("degree_correlation must lie in [0, 1)")


def gen_covariate(spec: CovariateSpec, degrees, rng: np.random.Generator) -> np.ndarray:
    """Normal covariate, optionally correlated with degree.

    With correlation ``r`` the draw is ``mean + sd (r z_d + sqrt(1 - r^2) Z)``
    where ``z_d`` is the standardised degree vector.
    """
    d = np.asarray(degrees, dtype=float)
    if d.size == 0:
        raise ValueError("degrees must be nonempty")
    z = rng.standard_normal(d.size)
    r = spec.degree_correlation
    if r == 0:
        return spec.mean + spec.sd * z
    sd_d = d.std()
    if sd_d == 0:
        raise ValueError("degree vector has zero variance; cannot correlate the covariate with it")
    zd = (d - d.mean()) / sd_d
    return spec.mean + spec.sd * (r * zd + np.sqrt(1.0 - r * r) * z)


def sar_matrix(cluster: ClusterGraph, rho: float) -> sps.csr_matrix:
    return (sps.identity(cluster.size, format="csr") - rho * cluster.adjacency()).tocsr()


def sar_covariance(cluster: ClusterGraph, sigma2: float, rho: float) -> np.ndarray:
    """Dense ``sigma2 W W^T`` with ``W = (I - rho S)^-1``."""
    w = np.linalg.inv(np.eye(cluster.size) - rho * cluster.dense_adjacency())
    return sigma2 * w @ w.T


def sample_sar_effects(cluster: ClusterGraph, sigma2: float, rho: float, rng: np.random.Generator,
                       *, cluster_index: int | None = None, cond_cap: float = 1e10,
                       u: np.ndarray | None = None, size: int | None = None) -> np.ndarray:
    """Solve ``(I - rho S) delta = u`` for ``u ~ N(0, sigma2 I)``.

    ``size`` draws a batch: the result has shape ``(size, n)`` and the system
    is factorised once.
    """
    n = cluster.size
    if u is None:
        u = rng.normal(0.0, np.sqrt(sigma2), size=n if size is None else (size, n))
    if rho == 0 or cluster.n_edges == 0:
        return np.array(u, dtype=float)
    label = f"cluster {cluster_index}" if cluster_index is not None else "cluster"
    a = sar_matrix(cluster, rho)
    lam = spectral_radius(cluster)
    batch = np.ndim(u) == 2
    if abs(rho) * lam < 1.0:
        # symmetric positive definite; unit diagonal makes Jacobi preconditioning the identity
        cond = (1 + abs(rho) * lam) / (1 - abs(rho) * lam)
        if cond > cond_cap:
            raise PreconditionError(f"{label}: I - rho S nearly singular (condition ~{cond:.3g})")
        if batch:
            return spla.splu(a.tocsc()).solve(np.asarray(u, dtype=float).T).T
        m = sps.diags(1.0 / a.diagonal())
        delta, info = spla.cg(a, u, rtol=1e-12, atol=0.0, M=m, maxiter=10 * n)
        if info == 0:
            return delta
    dense = a.toarray()
    cond = np.linalg.cond(dense)
    if not np.isfinite(cond) or cond > cond_cap:
        raise PreconditionError(f"{label}: I - rho S nearly singular (condition ~{cond:.3g})")
    return np.linalg.solve(dense, np.asarray(u, dtype=float).T).T


def neighbor_mean(x, cluster: ClusterGraph, node: int) -> float:
    """Mean of ``x`` over the node's neighbours; 0 for an isolated node."""
    nb = cluster.neighbors(node)
    if len(nb) == 0:
        return 0.0
    return float(np.mean(np.asarray(x, dtype=float)[nb]))


def neighbor_means(x, cluster: ClusterGraph) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`neighbor_mean` plus the isolated-node flags."""
    x = np.asarray(x, dtype=float)
    deg = cluster.degrees
    rows = np.repeat(np.arange(cluster.size), deg)
    sums = np.bincount(rows, weights=x[cluster.indices], minlength=cluster.size)
    iso = deg == 0
    return np.where(iso, 0.0, sums / np.maximum(deg, 1)), iso


def population_neighbor_means(x, net: PopulationNetwork) -> tuple[np.ndarray, np.ndarray]:
    offs = net.offsets
    parts = [neighbor_means(np.asarray(x)[offs[i]:offs[i + 1]], c) for i, c in enumerate(net.clusters)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def linear_predictor(net: PopulationNetwork, x, delta, params: DgpParams) -> np.ndarray:
    nbm, iso = population_neighbor_means(x, net)
    if params.gamma and iso.any():
        warnings.warn(f"{int(iso.sum())} isolated node(s): homophily term set to 0", stacklevel=2)
    return params.beta0 + params.beta1 * np.asarray(x) + params.gamma * nbm + np.asarray(delta)


def draw_outcomes(eta: np.ndarray, link: str, rng: np.random.Generator, noise_var: float = 1.0) -> np.ndarray:
    if link == "identity":
        return eta + rng.normal(0.0, np.sqrt(noise_var), size=eta.shape) if noise_var else eta.copy()
    if link == "log":
        if np.any(eta > 30):
            raise GenerationError(f"Poisson mean exp({eta.max():.1f}) overflows; review beta/gamma/sigma2")
        return rng.poisson(np.exp(eta)).astype(float)
    if link == "logit":
        return (rng.random(eta.shape) < expit(eta)).astype(float)
    raise ValueError(f"unknown link {link!r}")


def sample_population_effects(net: PopulationNetwork, params: DgpParams, rng: np.random.Generator) -> np.ndarray:
    params.check_network(net)
    return np.concatenate([sample_sar_effects(c, params.sigma2, params.rho, rng, cluster_index=i)
                           for i, c in enumerate(net.clusters)])


def gen_outcomes(net: PopulationNetwork, x, delta, params: DgpParams, rng: np.random.Generator) -> np.ndarray:
    """Draw ``y`` for every population node given covariate and effects."""
    eta = linear_predictor(net, x, delta, params)
    return draw_outcomes(eta, params.link, rng, params.noise_var)


def calibrate_intercept(target_prevalence: float, params: DgpParams, cov: CovariateSpec,
                        net: PopulationNetwork, rng: np.random.Generator, n_draws: int = 100_000,
                        tol: float = 0.005, bracket: tuple[float, float] = (-50.0, 50.0)) -> float:
    """Intercept giving the requested outcome prevalence under the logit link.

    Synthetic ``(x, delta)`` draws are replicated over the network until
    ``n_draws`` people have been simulated; the prevalence is then the mean of
    ``expit(eta)``, which is monotone in the intercept.
    """
    if not 0.0 < target_prevalence < 1.0:
        raise ValueError("target prevalence must lie in (0, 1)")
    reps = max(1, int(np.ceil(n_draws / net.total_size)))
    offsets = []
    for _ in range(reps):
        x = gen_covariate(cov, net.degrees, rng)
        delta = sample_population_effects(net, params, rng)
        nbm, _ = population_neighbor_means(x, net)
        offsets.append(params.beta1 * x + params.gamma * nbm + delta)
    return calibrate_intercept_from_offsets(target_prevalence, np.concatenate(offsets), tol, bracket)


def calibrate_intercept_from_offsets(target: float, offsets: np.ndarray, tol: float = 0.005,
                                     bracket: tuple[float, float] = (-50.0, 50.0)) -> float:
    def gap(b0: float) -> float:
        return float(expit(b0 + offsets).mean()) - target

    lo, hi = bracket
    if gap(lo) > 0 or gap(hi) < 0:
        raise GenerationError(f"prevalence {target} not reachable for intercept in [{lo}, {hi}]")
    b0 = brentq(gap, lo, hi, xtol=1e-10)
    if abs(gap(b0)) >= tol:
        raise GenerationError("intercept calibration did not reach the prevalence tolerance")
    return float(b0)
