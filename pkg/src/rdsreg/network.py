"""Clustered undirected population networks.

A population is a list of node-disjoint clusters.  Each cluster stores its
edges as a sorted array of ``(a, b)`` pairs with ``a < b`` plus a CSR-style
neighbour index, so degree and neighbour queries are O(1) slices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sps


class ConvergenceError(RuntimeError):
    """Raised when an iterative routine hits its iteration cap."""

    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


def _canonical_edges(edges, size: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    if arr.min() < 0 or arr.max() >= size:
        raise ValueError(f"edge endpoint out of range for cluster of size {size}")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise ValueError("self-loops are not allowed")
    arr = np.sort(arr, axis=1)
    arr = np.unique(arr, axis=0)
    return arr


@dataclass(frozen=True, eq=False)
class ClusterGraph:
    """Simple undirected graph on nodes ``0..size-1``.

    Duplicate edges are merged and ``(b, a)`` is stored as ``(a, b)``.
    """

    size: int
    edges: np.ndarray
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, size: int, edges: Iterable[Sequence[int]] | np.ndarray = ()) -> ClusterGraph:
        size = int(size)
        if size < 0:
            raise ValueError("size must be non-negative")
        e = _canonical_edges(list(edges) if not isinstance(edges, np.ndarray) else edges, size)
        both = np.concatenate([e, e[:, ::-1]]) if len(e) else e
        order = np.lexsort((both[:, 1], both[:, 0])) if len(both) else np.empty(0, dtype=np.int64)
        both = both[order]
        counts = np.bincount(both[:, 0], minlength=size) if len(both) else np.zeros(size, dtype=np.int64)
        indptr = np.zeros(size + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = both[:, 1].copy() if len(both) else np.empty(0, dtype=np.int64)
        e.setflags(write=False)
        indptr.setflags(write=False)
        indices.setflags(write=False)
        return cls(size, e, indptr, indices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def degree(self, node: int) -> int:
        return int(self.indptr[node + 1] - self.indptr[node])

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    def has_edge(self, a: int, b: int) -> bool:
        nb = self.neighbors(a)
        i = np.searchsorted(nb, b)
        return bool(i < len(nb) and nb[i] == b)

    def adjacency(self) -> sps.csr_matrix:
        data = np.ones(len(self.indices))
        return sps.csr_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.size, self.size))
        if self.n_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClusterGraph):
            return NotImplemented
        return self.size == other.size and np.array_equal(self.edges, other.edges)

    def __hash__(self) -> int:
        return hash((self.size, self.edges.tobytes()))


@dataclass(frozen=True)
class PopulationNetwork:
    """Node-disjoint union of clusters with global ids ``0..N-1``.

    Cluster ``i`` owns the contiguous global id block starting at
    ``offsets[i]``.
    """

    clusters: tuple[ClusterGraph, ...]

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))

    @property
    def offsets(self) -> np.ndarray:
        sizes = [c.size for c in self.clusters]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def total_size(self) -> int:
        return int(sum(c.size for c in self.clusters))

    @property
    def n_edges(self) -> int:
        return int(sum(c.n_edges for c in self.clusters))

    @property
    def cluster_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.clusters)), [c.size for c in self.clusters])

    @property
    def degrees(self) -> np.ndarray:
        if not self.clusters:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([c.degrees for c in self.clusters])

    def locate(self, node: int) -> tuple[int, int]:
        """Map a global node id to ``(cluster index, local id)``."""
        offs = self.offsets
        if not 0 <= node < offs[-1]:
            raise IndexError(f"node {node} outside population of size {offs[-1]}")
        ci = int(np.searchsorted(offs, node, side="right") - 1)
        return ci, int(node - offs[ci])

    def neighbors(self, node: int) -> np.ndarray:
        ci, local = self.locate(node)
        return self.clusters[ci].neighbors(local) + self.offsets[ci]

    def global_edges(self) -> np.ndarray:
        offs = self.offsets
        parts = [c.edges + offs[i] for i, c in enumerate(self.clusters) if c.n_edges]
        return np.concatenate(parts) if parts else np.empty((0, 2), dtype=np.int64)

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Global CSR neighbour arrays ``(indptr, indices)``."""
        offs = self.offsets
        indptr = [np.zeros(1, dtype=np.int64)]
        indices = []
        base = 0
        for i, c in enumerate(self.clusters):
            indptr.append(c.indptr[1:] + base)
            indices.append(c.indices + offs[i])
            base += len(c.indices)
        return np.concatenate(indptr), (np.concatenate(indices) if indices else np.empty(0, dtype=np.int64))


def spectral_radius(cluster: ClusterGraph, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest-magnitude adjacency eigenvalue by power iteration.

    Iterates on ``A + I`` (same dominant eigenvector, spectrum shifted to be
    non-negative for bipartite graphs) starting from the all-ones vector.
    """
    if cluster.size == 0:
        raise ValueError("cluster must be nonempty")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if cluster.n_edges == 0:
        return 0.0
    a = cluster.adjacency()
    n = cluster.size
    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = a @ v + v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector orthogonal to the dominant eigenspace
            v = 1.0 + 1e-3 * np.arange(n)
            v /= np.linalg.norm(v)
            continue
        w /= norm
        new = float(w @ (a @ w))
        if abs(new - lam) <= tol * max(abs(new), 1.0) and np.linalg.norm(w - v) < np.sqrt(tol):
            return abs(new)
        lam, v = new, w
    raise ConvergenceError("power iteration did not converge", max_iter)


def induced_subgraph(cluster: ClusterGraph, nodes: Iterable[int]) -> tuple[ClusterGraph, dict[int, int]]:
    """Subgraph on ``nodes`` keeping edges with both endpoints inside.

    Returns the relabelled graph and the ``old -> new`` id map; new ids follow
    ascending old id.
    """
    keep = np.unique(np.asarray(list(nodes), dtype=np.int64))
    if len(keep) and (keep[0] < 0 or keep[-1] >= cluster.size):
        raise ValueError("nodes must be a subset of the cluster's nodes")
    relabel = {int(old): new for new, old in enumerate(keep)}
    if cluster.n_edges == 0 or len(keep) == 0:
        return ClusterGraph.from_edges(len(keep)), relabel
    mask = np.isin(cluster.edges[:, 0], keep) & np.isin(cluster.edges[:, 1], keep)
    kept = cluster.edges[mask]
    new_edges = np.searchsorted(keep, kept)
    return ClusterGraph.from_edges(len(keep), new_edges), relabel


def density(net: PopulationNetwork) -> float:
    """Ties over possible ties, counting all N(N-1)/2 dyads."""
    n = net.total_size
    if n < 2:
        raise ValueError("density needs at least two nodes")
    return net.n_edges / (n * (n - 1) / 2)


def write_edge_list(net: PopulationNetwork, path: str | Path, attributes: str | Path | None = None) -> None:
    """Write ``cluster_id,node_a,node_b`` rows with global 0-based node ids.

    Cluster sizes go into the optional ``node_id,cluster_id,degree``
    companion file; without it isolated trailing nodes cannot be recovered.
    """
    offs = net.offsets
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "node_a", "node_b"])
        for ci, c in enumerate(net.clusters):
            for a, b in c.edges:
                w.writerow([ci, int(a + offs[ci]), int(b + offs[ci])])
    if attributes is not None:
        with open(attributes, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "cluster_id", "degree"])
            for node, (ci, d) in enumerate(zip(net.cluster_ids, net.degrees)):
                w.writerow([node, int(ci), int(d)])


def read_edge_list(path: str | Path, attributes: str | Path | None = None) -> PopulationNetwork:
    """Inverse of :func:`write_edge_list`.

    Node ids must form contiguous blocks per cluster, in cluster order.
    """
    members: dict[int, set[int]] = {}
    edges: dict[int, list[tuple[int, int]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ci, a, b = int(row["cluster_id"]), int(row["node_a"]), int(row["node_b"])
            members.setdefault(ci, set()).update((a, b))
            edges.setdefault(ci, []).append((a, b))
    if attributes is not None:
        with open(attributes, newline="") as fh:
            for row in csv.DictReader(fh):
                members.setdefault(int(row["cluster_id"]), set()).add(int(row["node_id"]))
    clusters = []
    expected_start = 0
    for ci in sorted(members):
        lo, hi = min(members[ci]), max(members[ci])
        if lo != expected_start:
            raise ValueError(f"{path}: cluster {ci} does not start at node {expected_start}")
        local = np.asarray(edges.get(ci, []), dtype=np.int64).reshape(-1, 2) - lo
        clusters.append(ClusterGraph.from_edges(hi - lo + 1, local))
        expected_start = hi + 1
    return PopulationNetwork(tuple(clusters))
