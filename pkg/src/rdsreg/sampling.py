"""RDS recruitment on a population network."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import ClusterGraph, PopulationNetwork

TREE_COLUMNS = ("node_id", "cluster_id", "seed_id", "recruiter_id", "wave", "degree")


@dataclass(frozen=True)
class RdsConfig:
    num_seeds: int = 10
    coupons: int = 3
    sample_fraction: float = 0.2
    rng_seed: int = 0
    seed_mode: str = "cluster"

    def __post_init__(self):
        if self.num_seeds < 1:
            raise ValueError("need at least one seed")
        if self.coupons < 0:
            raise ValueError("coupons must be non-negative")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if self.seed_mode not in ("cluster", "uniform"):
            raise ValueError(f"unknown seed_mode {self.seed_mode!r}")

    def target_size(self, population_size: int) -> int:
        n = math.ceil(self.sample_fraction * population_size - 1e-9)
        if n < self.num_seeds:
            raise ValueError(f"target sample size {n} is smaller than the number of seeds")
        return n


@dataclass(frozen=True, eq=False)
class RecruitmentTree:
    """Observed RDS sample in recruitment order.

    ``recruiter_id`` is -1 for seeds.  Row ``i`` is the ``i``-th recruit.
    """

    node_id: np.ndarray
    cluster_id: np.ndarray
    seed_id: np.ndarray
    recruiter_id: np.ndarray
    wave: np.ndarray
    degree: np.ndarray

    def __post_init__(self):
        for name in TREE_COLUMNS:
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.node_id)

    @property
    def is_seed(self) -> np.ndarray:
        return self.recruiter_id < 0

    @property
    def n_seeds(self) -> int:
        return int(self.is_seed.sum())

    @property
    def tree_edges(self) -> np.ndarray:
        """``(recruiter, recruit)`` node id pairs."""
        m = ~self.is_seed
        return np.column_stack([self.recruiter_id[m], self.node_id[m]])

    def parent_rows(self) -> np.ndarray:
        """Row index of each recruit's recruiter (-1 for seeds)."""
        pos = {int(v): i for i, v in enumerate(self.node_id)}
        return np.array([pos[int(r)] if r >= 0 else -1 for r in self.recruiter_id], dtype=np.int64)

    def children_rows(self) -> list[np.ndarray]:
        parent = self.parent_rows()
        kids: list[list[int]] = [[] for _ in range(self.n)]
        for i, p in enumerate(parent):
            if p >= 0:
                kids[p].append(i)
        return [np.asarray(k, dtype=np.int64) for k in kids]

    def as_columns(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TREE_COLUMNS}


def select_seeds(net: PopulationNetwork, s: int, rng: np.random.Generator, mode: str = "cluster") -> list[int]:
    """Pick ``s`` distinct seeds.

    ``cluster`` mode visits clusters in a random order, one uniform seed per
    cluster, cycling through the clusters again while ``s`` exceeds their
    number.  ``uniform`` mode samples nodes uniformly without replacement.
    """
    if s < 1:
        raise ValueError("need at least one seed")
    if s > net.total_size:
        raise ValueError("more seeds than nodes")
    if mode == "uniform":
        return [int(v) for v in rng.choice(net.total_size, size=s, replace=False)]
    offs = net.offsets
    m = len(net.clusters)
    if any(c.size == 0 for c in net.clusters):
        raise ValueError("empty cluster in population network")
    taken: set[int] = set()
    seeds: list[int] = []
    order = rng.permutation(m)
    k = 0
    while len(seeds) < s:
        ci = int(order[k % m])
        k += 1
        free = [v for v in range(net.clusters[ci].size) if v + offs[ci] not in taken]
        if not free:
            if k > m * (s + 1):
                raise ValueError("not enough nodes to place the requested seeds")
            continue
        v = int(free[rng.integers(len(free))]) + int(offs[ci])
        taken.add(v)
        seeds.append(v)
    return seeds


def run_rds(net: PopulationNetwork, cfg: RdsConfig, rng: np.random.Generator | None = None) -> RecruitmentTree:
    """Breadth-ordered coupon recruitment until ``ceil(f N)`` people are in.

    Every recruiter hands out up to ``coupons`` coupons, each to a uniformly
    chosen not-yet-recruited neighbour.  When no active recruiter is left a
    fresh seed is drawn uniformly from everyone not yet recruited.
    """
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    big_n = net.total_size
    target = cfg.target_size(big_n)
    indptr, indices = net.csr()
    cluster_of = net.cluster_ids
    degrees = np.diff(indptr)

    recruited = np.zeros(big_n, dtype=bool)
    rows: list[tuple[int, int, int, int, int, int]] = []
    queue: deque[int] = deque()

    def admit(node: int, seed: int, recruiter: int, wave: int) -> None:
        recruited[node] = True
        rows.append((node, int(cluster_of[node]), seed, recruiter, wave, int(degrees[node])))
        queue.append(len(rows) - 1)

    for v in select_seeds(net, cfg.num_seeds, rng, cfg.seed_mode):
        admit(v, v, -1, 0)
    while len(rows) < target:
        if not queue:
            free = np.flatnonzero(~recruited)
            v = int(free[rng.integers(len(free))])
            admit(v, v, -1, 0)
            continue
        row = queue.popleft()
        node, _, seed, _, wave, _ = rows[row]
        for _ in range(cfg.coupons):
            if len(rows) >= target:
                break
            nb = indices[indptr[node]:indptr[node + 1]]
            free = nb[~recruited[nb]]
            if len(free) == 0:
                break
            admit(int(free[rng.integers(len(free))]), seed, node, wave + 1)
    cols = list(zip(*rows))
    return RecruitmentTree(*[np.asarray(c, dtype=np.int64) for c in cols])


def tree_graph(tree: RecruitmentTree) -> ClusterGraph:
    """Recruiter-recruit ties as an undirected graph over row indices."""
    parent = tree.parent_rows()
    m = parent >= 0
    return ClusterGraph.from_edges(tree.n, np.column_stack([parent[m], np.flatnonzero(m)]))


def observed_adjacency(tree: RecruitmentTree) -> dict[int, tuple[ClusterGraph, np.ndarray]]:
    """Per recruitment tree: the observed graph and the node ids of its rows."""
    parent = tree.parent_rows()
    out = {}
    for seed in np.unique(tree.seed_id):
        rows = np.flatnonzero(tree.seed_id == seed)
        local = {int(r): i for i, r in enumerate(rows)}
        edges = [(local[int(parent[r])], local[int(r)]) for r in rows if parent[r] >= 0]
        out[int(seed)] = (ClusterGraph.from_edges(len(rows), edges), tree.node_id[rows])
    return out


def _fmt(v: int) -> str:
    return "" if v < 0 else str(int(v))


def write_tree(tree: RecruitmentTree, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
    """CSV with ``node_id,cluster_id,seed_id,recruiter_id,wave,degree`` (+ extra columns)."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(TREE_COLUMNS) + list(extra))
        for i in range(tree.n):
            row = [int(tree.node_id[i]), int(tree.cluster_id[i]), int(tree.seed_id[i]),
                   _fmt(tree.recruiter_id[i]), int(tree.wave[i]), int(tree.degree[i])]
            row += [repr(float(v[i])) if np.issubdtype(np.asarray(v).dtype, np.floating) else v[i]
                    for v in extra.values()]
            w.writerow(row)


def read_tree(path: str | Path) -> tuple[RecruitmentTree, dict[str, np.ndarray]]:
    """Read a tree file; columns beyond the tree schema are returned as floats."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = [c for c in TREE_COLUMNS if c not in fields]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        rows = list(reader)
    cols = {c: [] for c in TREE_COLUMNS}
    extra = {c: [] for c in fields if c not in TREE_COLUMNS}
    for r in rows:
        for c in TREE_COLUMNS:
            v = r[c].strip()
            cols[c].append(-1 if v == "" else int(v))
        for c in extra:
            extra[c].append(float(r[c]))
    tree = RecruitmentTree(**{c: np.asarray(v, dtype=np.int64) for c, v in cols.items()})
    return tree, {c: np.asarray(v, dtype=float) for c, v in extra.items()}
