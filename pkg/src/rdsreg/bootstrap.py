"""Tree and neighbourhood bootstrap for RDS regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .glmm import FitResult, ModelSpec, fit_model
from .sampling import RecruitmentTree
from .weights import apply_scheme

log = logging.getLogger(__name__)

Columns = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class BootstrapConfig:
    method: str = "neighborhood"
    replicates: int = 500
    level: float = 0.95
    rng_seed: int = 0
    replace: bool = True
    neighborhood_variant: str = "size_matched"

    def __post_init__(self):
        if self.method not in ("tree", "neighborhood"):
            raise ValueError("method must be 'tree' or 'neighborhood'")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if self.neighborhood_variant not in NEIGHBORHOOD_VARIANTS:
            raise ValueError(f"neighborhood_variant must be one of {NEIGHBORHOOD_VARIANTS}")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    names: tuple[str, ...]
    replicate_estimates: np.ndarray
    se: np.ndarray
    ci: np.ndarray
    failed_replicates: int
    replicates: int
    flagged: bool

    @property
    def variance(self) -> np.ndarray:
        return self.se ** 2


@dataclass(frozen=True, eq=False)
class TreeResample:
    """A resampled tree: ``rows`` index the original sample, one entry per appearance.

    ``parent`` and ``root`` are positions within this resample (-1 for roots).
    """

    rows: np.ndarray
    parent: np.ndarray
    root: np.ndarray
    wave: np.ndarray


def _children_csr(tree: RecruitmentTree) -> tuple[np.ndarray, np.ndarray]:
    parent = tree.parent_rows()
    kids = np.flatnonzero(parent >= 0)
    order = np.argsort(parent[kids], kind="stable")
    kids = kids[order]
    counts = np.bincount(parent[kids], minlength=tree.n)
    start = np.concatenate([[0], np.cumsum(counts)])
    return start, kids


def tree_resample(tree: RecruitmentTree, rng: np.random.Generator, replace: bool = True,
                  _csr=None) -> TreeResample:
    """Resample seeds, then each drawn node's recruits, level by level.

    Every level draws as many units as the original node had recruits, so
    the resample size is random.  Without replacement each level is a
    permutation of the original set.
    """
    if tree.n == 0:
        raise ValueError("cannot resample an empty tree")
    start, kids = _children_csr(tree) if _csr is None else _csr
    nkids = np.diff(start)
    seeds = np.flatnonzero(tree.is_seed)
    level = rng.choice(seeds, size=len(seeds), replace=replace)
    rows = [level]
    parents = [np.full(len(level), -1, dtype=np.int64)]
    roots = [np.arange(len(level), dtype=np.int64)]
    waves = [np.zeros(len(level), dtype=np.int64)]
    pos = np.arange(len(level), dtype=np.int64)
    root = roots[0]
    base = len(level)
    depth = 0
    while True:
        k = nkids[level]
        total = int(k.sum())
        if total == 0:
            break
        depth += 1
        par_rows = np.repeat(level, k)
        par_pos = np.repeat(pos, k)
        if replace:
            offs = rng.integers(0, np.repeat(k, k))
        else:
            offs = np.concatenate([rng.permutation(int(c)) for c in k if c])
        new_level = kids[start[par_rows] + offs]
        new_pos = base + np.arange(total, dtype=np.int64)
        rows.append(new_level)
        parents.append(par_pos)
        root = np.repeat(root, k)
        roots.append(root)
        waves.append(np.full(total, depth, dtype=np.int64))
        level, pos, base = new_level, new_pos, base + total
    return TreeResample(np.concatenate(rows), np.concatenate(parents), np.concatenate(roots),
                        np.concatenate(waves))


NEIGHBORHOOD_VARIANTS = ("size_matched", "literal")


def _tree_edges(tree: RecruitmentTree) -> tuple[np.ndarray, np.ndarray]:
    parent = tree.parent_rows()
    child = np.flatnonzero(parent >= 0)
    return parent[child], child


def _neighbor_csr(n: int, edges) -> tuple[np.ndarray, np.ndarray]:
    a, b = edges
    src = np.concatenate([a, b])
    dst = np.concatenate([b, a])
    order = np.argsort(src, kind="stable")
    start = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n))])
    return start, dst[order]


def stage_one_size(tree: RecruitmentTree, variant: str = "literal") -> int:
    """Stage-one draw count: ``round(n / c_r)`` (literal) or ``round(n / (1 + c_r))``.

    ``c_r = 2 |E| / n`` is the mean number of tree ties per recruit.  The
    size-matched count makes the expected replicate size equal ``n`` once each
    draw brings its neighbours along.
    """
    edges = int((~tree.is_seed).sum())
    if edges == 0:
        return tree.n
    c_r = 2.0 * edges / tree.n
    denom = c_r if variant == "literal" else 1.0 + c_r
    return min(tree.n, max(1, int(round(tree.n / denom))))


def stage_one_draw(tree: RecruitmentTree, rng: np.random.Generator, variant: str = "size_matched") -> np.ndarray:
    """Stage-one recruit rows: uniform, without replacement (literal) or with it (size-matched)."""
    k = stage_one_size(tree, variant)
    if variant == "literal":
        return rng.choice(tree.n, size=k, replace=False)
    return rng.integers(0, tree.n, size=k)


def neighborhood_resample(tree: RecruitmentTree, rng: np.random.Generator, variant: str = "size_matched",
                          _cache=None) -> tuple[np.ndarray, bool]:
    """Rows of a neighbourhood-bootstrap replicate and a fallback flag.

    Stage one draws recruits uniformly; stage two adds every tree neighbour of
    each drawn recruit.

    ``variant="size_matched"`` (default) draws ``round(n / (1 + c_r))``
    recruits with replacement and keeps one copy of the neighbourhood per
    draw, so replicates have about ``n`` rows.  ``variant="literal"`` draws
    ``round(n / c_r)`` recruits without replacement and returns the induced
    node set, each row once.  A tree with no ties falls back to a
    with-replacement simple random sample of size ``n`` (flag set).
    """
    if variant not in NEIGHBORHOOD_VARIANTS:
        raise ValueError(f"variant must be one of {NEIGHBORHOOD_VARIANTS}")
    n = tree.n
    if _cache is None:
        edges = _tree_edges(tree)
        _cache = (edges, _neighbor_csr(n, edges))
    edges, (start, nbr) = _cache
    if len(edges[0]) == 0:
        return np.sort(rng.integers(0, n, size=n)), True
    sel = stage_one_draw(tree, rng, variant)
    if variant == "literal":
        chosen = np.zeros(n, dtype=bool)
        chosen[sel] = True
        keep = chosen.copy()
        a, b = edges
        keep[b[chosen[a]]] = True
        keep[a[chosen[b]]] = True
        return np.flatnonzero(keep), False
    lens = start[sel + 1] - start[sel]
    # per draw: the recruit itself followed by its neighbours
    block = lens + 1
    first = np.cumsum(block) - block
    is_self = np.zeros(int(block.sum()), dtype=bool)
    is_self[first] = True
    out = np.empty(len(is_self), dtype=np.int64)
    out[first] = sel
    off = np.arange(int(lens.sum())) - np.repeat(np.cumsum(lens) - lens, lens)
    out[~is_self] = nbr[np.repeat(start[sel], lens) + off]
    return out, False


def _take(data: Columns, rows: np.ndarray) -> dict[str, np.ndarray]:
    return {k: np.asarray(v)[rows] for k, v in data.items()}


def tree_replicate_data(data: Columns, res: TreeResample) -> dict[str, np.ndarray]:
    """Replicate columns; every appearance gets its own node id so chains stay distinct."""
    out = _take(data, res.rows)
    pos = np.arange(len(res.rows), dtype=np.int64)
    out["source_row"] = res.rows
    out["node_id"] = pos
    out["recruiter_id"] = res.parent
    out["seed_id"] = res.root
    out["wave"] = res.wave
    return out


def percentile_ci(estimates: np.ndarray, level: float) -> np.ndarray:
    """Nearest-rank percentile interval per column."""
    alpha = (1.0 - level) / 2
    lo = np.quantile(estimates, alpha, axis=0, method="inverted_cdf")
    hi = np.quantile(estimates, 1 - alpha, axis=0, method="inverted_cdf")
    return np.column_stack([lo, hi])


def default_refitter(true_n: int | None = None, min_degree: int | None = 1, draws: int = 2000):
    """Refit with weights recomputed from the replicate's degrees."""

    def refit(rep: dict[str, np.ndarray], spec: ModelSpec, rng: np.random.Generator) -> FitResult:
        scheme = spec.weight_scheme
        if scheme.kind != "unweighted":
            n_pop = true_n if true_n is not None else len(rep["degree"])
            wv = apply_scheme(rep["degree"], scheme, max(n_pop, len(rep["degree"])), rng=rng,
                              draws=draws, min_degree=min_degree)
            rep = dict(rep, weight=wv.weight)
        else:
            rep = dict(rep, weight=np.ones(len(rep["degree"])))
        return fit_model(rep, spec)

    return refit


def bootstrap_fit(dataset: Columns, tree: RecruitmentTree, spec: ModelSpec, cfg: BootstrapConfig,
                  refitter: Callable | None = None, names: tuple[str, ...] | None = None) -> BootstrapResult:
    """Refit ``spec`` on ``cfg.replicates`` resamples of ``(dataset, tree)``.

    ``dataset`` rows must be aligned with ``tree`` rows.  Failed replicate fits
    are dropped and counted; more than 20% failures flags the result.
    """
    data = {k: np.asarray(dataset[k]) for k in (dataset.keys() if hasattr(dataset, "keys") else dataset.columns)}
    if len(next(iter(data.values()))) != tree.n:
        raise ValueError("dataset and tree must have the same rows")
    refitter = refitter or default_refitter()
    streams = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.replicates)
    csr = _children_csr(tree) if cfg.method == "tree" else None
    edges = _tree_edges(tree)
    nb_cache = (edges, _neighbor_csr(tree.n, edges))
    estimates = []
    failed = 0
    for ss in streams:
        rng = np.random.default_rng(ss)
        if cfg.method == "tree":
            rep = tree_replicate_data(data, tree_resample(tree, rng, cfg.replace, _csr=csr))
        else:
            rows, _ = neighborhood_resample(tree, rng, cfg.neighborhood_variant, _cache=nb_cache)
            rep = _take(data, rows)
        try:
            fit = refitter(rep, spec, rng)
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.debug("bootstrap replicate failed: %s", exc)
            failed += 1
            continue
        names = names or fit.names
        estimates.append(fit.coef)
    names = names or spec.term_names
    est = np.array(estimates) if estimates else np.empty((0, len(names)))
    if len(est) >= 2:
        se = est.std(axis=0, ddof=1)
        ci = percentile_ci(est, cfg.level)
    elif len(est) == 1:
        se = np.zeros(est.shape[1])
        ci = np.column_stack([est[0], est[0]])
    else:
        se = np.full(len(names), np.nan)
        ci = np.full((len(names), 2), np.nan)
    flagged = len(est) < 2 or failed > 0.2 * cfg.replicates
    return BootstrapResult(tuple(names), est, se, ci, failed, cfg.replicates, flagged)
