"""Replication studies: simulate, sample, fit, bootstrap, summarise.

Random streams are derived from ``(master_seed, stream name, cell labels,
replicate)`` so any cell or replicate can be recomputed in isolation and the
execution order never changes a result.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .bootstrap import BootstrapConfig, bootstrap_fit, default_refitter
from .dgp import (CovariateSpec, DgpParams, calibrate_intercept, gen_covariate, gen_outcomes,
                  sample_population_effects)
from .ergm import ErgmConfig, generate_population
from .glmm import ModelSpec, fit_model, wald_ci
from .metrics import (coverage, coverage_mcse, metric_relative_bias, rmse,
                      variance_relative_bias)
from .network import PopulationNetwork
from .sampling import RdsConfig, RecruitmentTree, run_rds
from .weights import WeightScheme, apply_scheme

log = logging.getLogger(__name__)

DATASET_COLUMNS = ("node_id", "cluster_id", "seed_id", "recruiter_id", "wave", "degree", "x", "y")

REPORT_COLUMNS = ("f", "rho", "rho_d", "link", "clustering", "scheme", "RB", "RMSE", "CI", "TCI", "NCI",
                  "var_rb_model", "var_rb_tree", "var_rb_nbhd", "R_effective", "CI_mcse", "TCI_mcse",
                  "NCI_mcse", "flagged")
LABEL_COLUMNS = REPORT_COLUMNS[:6]
RECORD_COLUMNS = ("f", "rho", "rho_d", "link", "clustering", "scheme", "replicate", "beta0", "estimate",
                  "se_model", "ci_lo", "ci_hi", "se_tree", "tci_lo", "tci_hi", "se_nbhd", "nci_lo",
                  "nci_hi", "error")


def rng_stream(master_seed: int, name: str, *labels: Any) -> np.random.Generator:
    key = zlib.crc32(json.dumps([name, *labels], sort_keys=True, default=str).encode())
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(key,)))


def _seed_int(master_seed: int, name: str, *labels: Any) -> int:
    return int(rng_stream(master_seed, name, *labels).integers(0, 2**31 - 1))


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class StudyConfig:
    network: ErgmConfig = field(default_factory=lambda: ErgmConfig(gwd_coefficient=-1.5))
    num_seeds: int = 10
    coupons: int = 3
    sample_fractions: tuple[float, ...] = (0.2,)
    dgp: DgpParams = field(default_factory=DgpParams)
    rhos: tuple[float, ...] = (0.05,)
    links: tuple[str, ...] = ("identity",)
    target_prevalence: float | None = 0.3
    covariate: CovariateSpec = field(default_factory=CovariateSpec)
    degree_correlations: tuple[float, ...] = (0.0,)
    clusterings: tuple[str, ...] = ("seed", "recruiter")
    schemes: tuple[str, ...] = ("unweighted",)
    replicates: int = 200
    bootstrap_methods: tuple[str, ...] = ("tree", "neighborhood")
    bootstrap_replicates: int = 300
    neighborhood_variant: str = "size_matched"
    level: float = 0.95
    master_seed: int = 1
    fixed_network: bool = False
    ss_draws: int = 2000

    def __post_init__(self):
        for name in ("sample_fractions", "rhos", "links", "degree_correlations", "clusterings", "schemes",
                     "bootstrap_methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        for s in self.schemes:
            WeightScheme.parse(s)
        for m in self.bootstrap_methods:
            BootstrapConfig(method=m, neighborhood_variant=self.neighborhood_variant)
        for f in self.sample_fractions:
            RdsConfig(self.num_seeds, self.coupons, f).target_size(self.network.population_size)
        for c in self.clusterings:
            ModelSpec(clustering=c)
        for link in self.links:
            DgpParams(link=link)

    @classmethod
    def from_mapping(cls, cfg: dict) -> StudyConfig:
        cfg = dict(cfg)
        kw: dict[str, Any] = {}
        # nested blocks override the study defaults, not the bare class defaults
        defaults = {f.name: f.default_factory() for f in fields(cls) if f.name in ("network", "dgp", "covariate")}
        for name, value in defaults.items():
            if name in cfg:
                kw[name] = replace(value, **cfg.pop(name))
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown study config keys: {sorted(unknown)}")
        kw.update(cfg)
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> StudyConfig:
        text = Path(path).read_text()
        stripped = text.lstrip()
        cfg = json.loads(text) if stripped.startswith("{") else parse_flat_config(text)
        return cls.from_mapping(cfg)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_scalar(v: str):
    v = v.strip()
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


_LIST_KEYS = {"sample_fractions", "rhos", "links", "degree_correlations", "clusterings", "schemes",
              "bootstrap_methods"}


def parse_flat_config(text: str) -> dict:
    """``key = value`` lines; dotted keys nest (``dgp.beta1 = 2``); lists are comma separated."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if parts[-1] in _LIST_KEYS:
            val: Any = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            val = _parse_scalar(value)
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return out


@dataclass(frozen=True)
class DataCell:
    f: float
    rho: float
    rho_d: float
    link: str

    def labels(self) -> tuple:
        return (self.f, self.rho, self.rho_d, self.link)


def data_cells(cfg: StudyConfig) -> list[DataCell]:
    return [DataCell(f, r, d, link) for f, r, d, link in
            product(cfg.sample_fractions, cfg.rhos, cfg.degree_correlations, cfg.links)]


def model_specs(cfg: StudyConfig, link: str) -> list[tuple[str, ModelSpec]]:
    return [(s, ModelSpec(link=link, clustering=c, weight_scheme=WeightScheme.parse(s)))
            for c in cfg.clusterings for s in cfg.schemes]


# ---------------------------------------------------------------- simulation


def network_for(cfg: StudyConfig, replicate: int) -> PopulationNetwork:
    r = 0 if cfg.fixed_network else replicate
    return generate_population(cfg.network, _seed_int(cfg.master_seed, "network", r))


@lru_cache(maxsize=64)
def _calibrated_beta0(cfg: StudyConfig, cell: DataCell) -> float:
    net = network_for(replace(cfg, fixed_network=True), 0)
    params = replace(cfg.dgp, rho=cell.rho, link="logit")
    cov = replace(cfg.covariate, degree_correlation=cell.rho_d)
    rng = rng_stream(cfg.master_seed, "calibration", cell.rho, cell.rho_d)
    return calibrate_intercept(cfg.target_prevalence, params, cov, net, rng)


def cell_params(cfg: StudyConfig, cell: DataCell) -> DgpParams:
    params = replace(cfg.dgp, rho=cell.rho, link=cell.link)
    if cell.link == "logit" and cfg.target_prevalence is not None:
        params = replace(params, beta0=_calibrated_beta0(cfg, cell))
    return params


def simulate_dataset(net: PopulationNetwork, params: DgpParams, cov: CovariateSpec, rds: RdsConfig,
                     rng_cov: np.random.Generator, rng_effects: np.random.Generator,
                     rng_sample: np.random.Generator) -> tuple[dict[str, np.ndarray], RecruitmentTree]:
    """Population outcome draw followed by RDS; returns recruit columns and the tree."""
    x = gen_covariate(cov, net.degrees, rng_cov)
    delta = sample_population_effects(net, params, rng_effects)
    y = gen_outcomes(net, x, delta, params, rng_effects)
    tree = run_rds(net, rds, rng_sample)
    data = tree.as_columns()
    data = {k: np.asarray(v) for k, v in data.items()}
    data["x"] = x[tree.node_id]
    data["y"] = y[tree.node_id]
    return data, tree


def run_replicate(cfg: StudyConfig, cell: DataCell, replicate: int) -> list[dict]:
    """All model fits and bootstraps of one replicate of one data cell."""
    m = cfg.master_seed
    net = network_for(cfg, replicate)
    params = cell_params(cfg, cell)
    cov = replace(cfg.covariate, degree_correlation=cell.rho_d)
    rds = RdsConfig(cfg.num_seeds, cfg.coupons, cell.f)
    data, tree = simulate_dataset(
        net, params, cov, rds,
        rng_stream(m, "covariate", cell.rho_d, replicate),
        rng_stream(m, "effects", cell.rho, cell.rho_d, cell.link, replicate),
        rng_stream(m, "sampling", cell.f, cell.rho_d, replicate))
    big_n = net.total_size
    refit = default_refitter(true_n=big_n, draws=cfg.ss_draws)
    records = []
    for label, spec in model_specs(cfg, cell.link):
        rec: dict[str, Any] = dict(zip(LABEL_COLUMNS, (*cell.labels(), spec.clustering, label)))
        rec.update(replicate=replicate, beta0=params.beta0, error="")
        try:
            wrng = rng_stream(m, "weights", *cell.labels(), label, replicate)
            wv = apply_scheme(data["degree"], spec.weight_scheme, big_n, rng=wrng, draws=cfg.ss_draws,
                              min_degree=1)
            d = dict(data, weight=wv.weight)
            fit = fit_model(d, spec)
            j = fit.names.index("x")
            ci = wald_ci(fit, cfg.level)[j]
            rec.update(estimate=float(fit.coef[j]), se_model=float(fit.se[j]),
                       ci_lo=float(ci[0]), ci_hi=float(ci[1]))
            for method, tag in (("tree", "tree"), ("neighborhood", "nbhd")):
                if method not in cfg.bootstrap_methods:
                    continue
                bcfg = BootstrapConfig(method, cfg.bootstrap_replicates, cfg.level,
                                       _seed_int(m, "bootstrap", *cell.labels(), spec.clustering, label,
                                                 method, replicate),
                                       neighborhood_variant=cfg.neighborhood_variant)
                br = bootstrap_fit(d, tree, spec, bcfg, refitter=refit)
                if br.flagged:
                    raise RuntimeError(f"{method} bootstrap unreliable ({br.failed_replicates} failures)")
                prefix = "t" if tag == "tree" else "n"
                rec.update({f"se_{tag}": float(br.se[j]), f"{prefix}ci_lo": float(br.ci[j, 0]),
                            f"{prefix}ci_hi": float(br.ci[j, 1])})
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.warning("cell %s %s/%s replicate %d failed: %s", cell.labels(), spec.clustering, label,
                        replicate, exc)
            rec["error"] = f"{type(exc).__name__}: {exc}"
        records.append({k: rec.get(k, float("nan")) for k in RECORD_COLUMNS})
    return records


def _task(args):
    cfg, cell, r = args
    return run_replicate(cfg, cell, r)


# ---------------------------------------------------------------- aggregation


@dataclass
class SimReport:
    rows: list[dict]
    records: list[dict] = field(default_factory=list)

    def row(self, **labels) -> dict:
        hits = [r for r in self.rows if all(_same(r[k], v) for k, v in labels.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {labels}")
        return hits[0]

    def cell_records(self, **labels) -> list[dict]:
        return [r for r in self.records if all(_same(r[k], v) for k, v in labels.items())]

    @property
    def any_flagged(self) -> bool:
        return any(r["flagged"] for r in self.rows)


def _same(a, b) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        try:
            return math.isclose(float(a), float(b), rel_tol=0, abs_tol=1e-12)
        except (TypeError, ValueError):
            return False
    return a == b


def summarize(records: list[dict], beta1: float, replicates: int) -> list[dict]:
    keyed: dict[tuple, list[dict]] = {}
    for rec in records:
        keyed.setdefault(tuple(rec[k] for k in LABEL_COLUMNS), []).append(rec)
    rows = []
    for key in sorted(keyed, key=lambda k: tuple(str(v) for v in k)):
        recs = sorted(keyed[key], key=lambda r: r["replicate"])
        ok = [r for r in recs if not r["error"]]
        row: dict[str, Any] = dict(zip(LABEL_COLUMNS, key))
        r_eff = len(ok)
        row["R_effective"] = r_eff
        nan = float("nan")
        if r_eff:
            est = np.array([r["estimate"] for r in ok])
            row["RB"] = metric_relative_bias(est, beta1).value
            row["RMSE"] = rmse(est, beta1)
            for tag, lo, hi, se in (("CI", "ci_lo", "ci_hi", "se_model"), ("TCI", "tci_lo", "tci_hi", "se_tree"),
                                    ("NCI", "nci_lo", "nci_hi", "se_nbhd")):
                iv = np.array([[r[lo], r[hi]] for r in ok], dtype=float)
                if np.all(np.isfinite(iv)):
                    row[tag] = coverage(iv, beta1)
                    row[f"{tag}_mcse"] = coverage_mcse(row[tag], r_eff)
                else:
                    row[tag] = row[f"{tag}_mcse"] = nan
                var_key = {"CI": "var_rb_model", "TCI": "var_rb_tree", "NCI": "var_rb_nbhd"}[tag]
                ses = np.array([r[se] for r in ok], dtype=float)
                row[var_key] = (variance_relative_bias(ses ** 2, est)
                                if r_eff >= 2 and np.all(np.isfinite(ses)) else nan)
        else:
            for k in REPORT_COLUMNS[6:-2]:
                row.setdefault(k, nan)
            for k in ("CI_mcse", "TCI_mcse", "NCI_mcse"):
                row[k] = nan
        row["flagged"] = (replicates - r_eff) > 0.1 * replicates
        rows.append({k: row.get(k, nan) for k in REPORT_COLUMNS})
    return rows


def run_study(cfg: StudyConfig, threads: int = 1, progress: bool = False) -> SimReport:
    """Run every data cell and replicate; one report row per cell x model."""
    tasks = [(cfg, cell, r) for cell in data_cells(cfg) for r in range(cfg.replicates)]
    records: list[dict] = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for recs in pool.map(_task, tasks, chunksize=1):
                records.extend(recs)
    else:
        for i, t in enumerate(tasks):
            records.extend(_task(t))
            if progress and (i + 1) % 10 == 0:
                log.info("%d/%d replicates done", i + 1, len(tasks))
    records.sort(key=lambda r: (tuple(str(r[k]) for k in LABEL_COLUMNS), r["replicate"]))
    return SimReport(summarize(records, cfg.dgp.beta1, cfg.replicates), records)


# ---------------------------------------------------------------- report files


def _fmt_full(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _fmt_round(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.2f}"
    return str(v)


def write_report(report: SimReport, path: str | Path) -> tuple[Path, Path]:
    """Rounded table at ``path`` and full-precision twin at ``<stem>_full.csv``.

    Replicate-level records, when present, go to ``<stem>_replicates.csv``.
    """
    path = Path(path)
    full = path.with_name(path.stem + "_full" + (path.suffix or ".csv"))
    try:
        for target, fmt in ((path, _fmt_round), (full, _fmt_full)):
            with open(target, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(REPORT_COLUMNS)
                for row in report.rows:
                    w.writerow([fmt(row[k]) for k in REPORT_COLUMNS])
        if report.records:
            rec_path = path.with_name(path.stem + "_replicates" + (path.suffix or ".csv"))
            with open(rec_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(RECORD_COLUMNS)
                for rec in report.records:
                    w.writerow([_fmt_full(rec[k]) for k in RECORD_COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path, full


def _parse_cell(key: str, v: str):
    if key in ("link", "clustering", "scheme", "error"):
        return v
    if key == "flagged":
        return v == "True"
    if key in ("R_effective", "replicate"):
        return int(v)
    return float(v)


def read_report(path: str | Path) -> SimReport:
    """Load a full-precision report written by :func:`write_report`."""
    with open(path, newline="") as fh:
        rows = [{k: _parse_cell(k, v) for k, v in r.items()} for r in csv.DictReader(fh)]
    return SimReport(rows)


def read_records(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse_cell(k, v) for k, v in r.items()} for r in csv.DictReader(fh)]


def write_dataset(data: dict[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [c for c in DATASET_COLUMNS if c in data] + [c for c in data if c not in DATASET_COLUMNS]
        w.writerow(cols)
        for i in range(len(data["node_id"])):
            row = []
            for c in cols:
                v = data[c][i]
                if c == "recruiter_id":
                    row.append("" if v < 0 else str(int(v)))
                elif np.issubdtype(np.asarray(data[c]).dtype, np.integer):
                    row.append(str(int(v)))
                else:
                    row.append(repr(float(v)))
            w.writerow(row)


def read_dataset(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = reader.fieldnames or []
    out: dict[str, np.ndarray] = {}
    for c in cols:
        vals = [r[c].strip() for r in rows]
        if c in ("node_id", "cluster_id", "seed_id", "recruiter_id", "wave", "degree"):
            out[c] = np.array([-1 if v == "" else int(v) for v in vals], dtype=np.int64)
        else:
            out[c] = np.array([float(v) for v in vals])
    return out


def tree_from_dataset(data: dict[str, np.ndarray]) -> RecruitmentTree:
    return RecruitmentTree(*(np.asarray(data[c]) for c in
                             ("node_id", "cluster_id", "seed_id", "recruiter_id", "wave", "degree")))


def iter_cells(report: SimReport) -> Iterable[dict]:
    return iter(report.rows)
