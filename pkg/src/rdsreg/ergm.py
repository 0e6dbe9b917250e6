"""Clustered population networks from an edges + GWD + homophily ERGM.

Each cluster is sampled independently by Metropolis-Hastings dyad toggling.
Only change statistics enter the acceptance ratio, so the normalising
constant is never needed.  The edge coefficient is not a user input: it is
calibrated by bisection so the realised density hits ``target_density``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numba
import numpy as np

from .network import ClusterGraph, PopulationNetwork, density


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ErgmConfig:
    population_size: int = 1000
    num_clusters: int = 10
    target_density: float = 0.01
    gwd_coefficient: float = -6.0
    gwd_decay: float = 3.0
    homophily_coefficient: float = 0.0
    burn_in: int | None = None
    thin: int | None = None
    density_band: float = 0.10
    max_retries: int = 50

    def __post_init__(self):
        if self.population_size < 2 or self.num_clusters < 1:
            raise ValueError("need at least two nodes and one cluster")
        if self.population_size % self.num_clusters:
            raise ValueError("population_size must be divisible by num_clusters")
        if not 0.0 < self.target_density < 1.0:
            raise ValueError("target_density must lie in (0, 1)")
        if self.target_density * (self.population_size - 1) < 1.0:
            raise ValueError("target density implies mean degree below 1")
        if self.gwd_decay < 0:
            raise ValueError("gwd_decay must be non-negative")
        edges_per_cluster = self.target_edges / self.num_clusters
        if edges_per_cluster > self.dyads_per_cluster:
            raise ValueError("target density cannot be reached inside disjoint clusters")

    @property
    def cluster_size(self) -> int:
        return self.population_size // self.num_clusters

    @property
    def dyads_per_cluster(self) -> int:
        k = self.cluster_size
        return k * (k - 1) // 2

    @property
    def target_edges(self) -> float:
        n = self.population_size
        return self.target_density * n * (n - 1) / 2

    @property
    def burn_in_steps(self) -> int:
        return self.burn_in if self.burn_in is not None else 20 * self.dyads_per_cluster

    @property
    def thin_steps(self) -> int:
        return self.thin if self.thin is not None else 10 * self.dyads_per_cluster

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class ErgmStatistics:
    edge_count: int
    gwd_value: float
    homophily_matches: int


def gwd_weights(max_degree: int, decay: float) -> np.ndarray:
    """Per-node GWD contribution ``e^d (1 - (1 - e^-d)^k)`` for k = 0..max_degree."""
    k = np.arange(max_degree + 1, dtype=float)
    r = 1.0 - math.exp(-decay)
    return math.exp(decay) * (1.0 - r ** k)


def ergm_statistics(cluster: ClusterGraph, attr=None, decay: float = 3.0) -> ErgmStatistics:
    deg = cluster.degrees
    gwd = float(gwd_weights(int(deg.max(initial=0)), decay)[deg].sum()) if cluster.size else 0.0
    matches = 0
    if attr is not None and cluster.n_edges:
        a = np.asarray(attr)
        matches = int(np.sum(a[cluster.edges[:, 0]] == a[cluster.edges[:, 1]]))
    return ErgmStatistics(cluster.n_edges, gwd, matches)


@numba.njit(cache=True)
def _mh_run(adj, deg, attr, coef, r, dyad_a, dyad_b, picks, unif, record_every, out):
    """Toggle ``len(picks)`` proposals in place; store edge counts every ``record_every`` steps."""
    edges = 0
    n = adj.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            if adj[i, j]:
                edges += 1
    rec = 0
    for t in range(picks.shape[0]):
        k = picks[t]
        a = dyad_a[k]
        b = dyad_b[k]
        same = 1.0 if attr[a] == attr[b] else 0.0
        if adj[a, b]:
            delta = -(coef[0] + coef[1] * (r ** (deg[a] - 1) + r ** (deg[b] - 1)) + coef[2] * same)
        else:
            delta = coef[0] + coef[1] * (r ** deg[a] + r ** deg[b]) + coef[2] * same
        if delta >= 0.0 or unif[t] < math.exp(delta):
            if adj[a, b]:
                adj[a, b] = False
                adj[b, a] = False
                deg[a] -= 1
                deg[b] -= 1
                edges -= 1
            else:
                adj[a, b] = True
                adj[b, a] = True
                deg[a] += 1
                deg[b] += 1
                edges += 1
        if record_every > 0 and (t + 1) % record_every == 0 and rec < out.shape[0]:
            out[rec] = edges
            rec += 1
    return edges


@lru_cache(maxsize=32)
def _dyads(size: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.triu_indices(size, k=1)
    return a.astype(np.int64), b.astype(np.int64)


def simulate_cluster(size: int, edge_coef: float, gwd_coef: float, decay: float,
                     rng: np.random.Generator, *, homophily_coef: float = 0.0, attr=None,
                     steps: int | None = None, init_density: float | None = None,
                     record_every: int = 0, n_records: int = 0):
    """Run one MH chain on a ``size``-node cluster.

    Returns the final graph, and the recorded edge-count trace when
    ``record_every`` is positive.
    """
    dyad_a, dyad_b = _dyads(size)
    n_dyads = len(dyad_a)
    steps = 20 * n_dyads if steps is None else int(steps)
    adj = np.zeros((size, size), dtype=np.bool_)
    if init_density and n_dyads:
        on = rng.random(n_dyads) < init_density
        adj[dyad_a[on], dyad_b[on]] = True
        adj[dyad_b[on], dyad_a[on]] = True
    deg = adj.sum(axis=1).astype(np.int64)
    attr_arr = np.zeros(size, dtype=np.int64) if attr is None else np.asarray(attr, dtype=np.int64)
    coef = np.array([edge_coef, gwd_coef, homophily_coef], dtype=float)
    r = 1.0 - math.exp(-decay)
    out = np.zeros(n_records, dtype=np.int64)
    if n_dyads and steps:
        picks = rng.integers(0, n_dyads, size=steps)
        unif = rng.random(steps)
        _mh_run(adj, deg, attr_arr, coef, r, dyad_a, dyad_b, picks, unif, record_every, out)
    ia, ib = np.nonzero(np.triu(adj, 1))
    graph = ClusterGraph.from_edges(size, np.column_stack([ia, ib]))
    if record_every > 0:
        return graph, out
    return graph


def _cluster_rngs(seed: int, m: int, attempt: int = 0) -> list[np.random.Generator]:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, attempt])
    return [np.random.default_rng(s) for s in ss.spawn(m)]


@lru_cache(maxsize=64)
def calibrate_edge_coefficient(cfg: ErgmConfig, calibration_seed: int = 20211) -> float:
    """Bisect the edge coefficient so the mean cluster edge count matches target.

    Deterministic in ``cfg``; cached so replicate generation calls it once.
    """
    size = cfg.cluster_size
    target = cfg.target_edges / cfg.num_clusters
    p0 = target / cfg.dyads_per_cluster
    reps = 4

    def mean_edges(coef: float) -> float:
        rngs = _cluster_rngs(calibration_seed, reps)
        return float(np.mean([
            simulate_cluster(size, coef, cfg.gwd_coefficient, cfg.gwd_decay, g,
                             homophily_coef=cfg.homophily_coefficient,
                             attr=(g.integers(0, 2, size) if cfg.homophily_coefficient else None),
                             steps=cfg.burn_in_steps, init_density=p0).n_edges
            for g in rngs
        ]))

    lo, hi = -30.0, 30.0
    if mean_edges(lo) > target or mean_edges(hi) < target:
        raise CalibrationError(f"edge coefficient bracket [{lo}, {hi}] does not straddle the target")
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if mean_edges(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-3:
            break
    return 0.5 * (lo + hi)


def generate_population(cfg: ErgmConfig, rng_seed: int, attr=None) -> PopulationNetwork:
    """Draw a clustered network whose density falls inside the calibration band.

    ``attr`` is an optional binary node attribute (length N) used by the
    homophily term; when the term is active and ``attr`` is absent, a random
    balanced attribute is drawn from the seed stream.
    """
    edge_coef = calibrate_edge_coefficient(cfg)
    size = cfg.cluster_size
    p0 = cfg.target_edges / cfg.num_clusters / cfg.dyads_per_cluster
    lo_d = cfg.target_density * (1 - cfg.density_band)
    hi_d = cfg.target_density * (1 + cfg.density_band)
    last = float("nan")
    for attempt in range(cfg.max_retries):
        clusters = []
        for ci, g in enumerate(_cluster_rngs(rng_seed, cfg.num_clusters, attempt)):
            a = None
            if cfg.homophily_coefficient:
                a = (np.asarray(attr)[ci * size:(ci + 1) * size] if attr is not None
                     else g.integers(0, 2, size))
            clusters.append(simulate_cluster(size, edge_coef, cfg.gwd_coefficient, cfg.gwd_decay, g,
                                             homophily_coef=cfg.homophily_coefficient, attr=a,
                                             steps=cfg.burn_in_steps, init_density=p0))
        net = PopulationNetwork(tuple(clusters))
        last = density(net)
        if lo_d <= last <= hi_d:
            return net
    raise CalibrationError(
        f"realised density {last:.5f} outside [{lo_d:.5f}, {hi_d:.5f}] after {cfg.max_retries} attempts")
