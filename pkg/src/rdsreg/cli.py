"""Command-line interface: ``rdsreg <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .bootstrap import BootstrapConfig, bootstrap_fit, default_refitter
from .dgp import CovariateSpec, DgpParams
from .ergm import ErgmConfig, generate_population
from .glmm import ModelSpec, fit_model, wald_ci
from .network import read_edge_list, write_edge_list
from .sampling import RdsConfig, read_tree, run_rds, write_tree
from .study import (DataCell, StudyConfig, cell_params, read_dataset, run_study, simulate_dataset,
                    tree_from_dataset, write_dataset, write_report)
from .weights import WeightScheme, apply_scheme

log = logging.getLogger("rdsreg")


def _scheme(name: str, variant: str) -> WeightScheme:
    if name == "none":
        return WeightScheme("unweighted")
    return WeightScheme(name, variant if name == "ss" else "true")


def _nodes_path(edges: Path) -> Path:
    return edges.with_name(edges.stem + "_nodes.csv")


def _load_network(path: str, nodes: str | None):
    p = Path(path)
    companion = Path(nodes) if nodes else _nodes_path(p)
    return read_edge_list(p, companion if companion.exists() else None)


def _weights_for(data, scheme: WeightScheme, pop_size: int | None, seed: int, draws: int) -> np.ndarray:
    if scheme.kind == "ss" and pop_size is None:
        raise SystemExit("--pop-size is required for the ss scheme")
    n_pop = pop_size if pop_size is not None else len(data["degree"])
    wv = apply_scheme(data["degree"], scheme, n_pop, rng=np.random.default_rng(seed), draws=draws,
                      min_degree=1)
    if not wv.converged:
        log.warning("ss weights did not converge in %d iterations", wv.iterations)
    return wv.weight


def _write_rows(path: str | None, header, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def _num(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- subcommands


def cmd_generate(a) -> int:
    cfg = ErgmConfig(population_size=a.population_size, num_clusters=a.clusters, target_density=a.density,
                     gwd_coefficient=a.gwd, gwd_decay=a.decay, max_retries=a.max_retries)
    net = generate_population(cfg, a.seed)
    out = Path(a.out)
    write_edge_list(net, out, _nodes_path(out))
    echo = {"ergm": asdict(cfg), "seed": a.seed}
    out.with_name(out.stem + "_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d nodes, %d edges to %s", net.total_size, net.n_edges, out)
    return 0


def cmd_sample(a) -> int:
    net = _load_network(a.network, a.nodes)
    cfg = RdsConfig(a.seeds, a.coupons, a.fraction, a.seed, a.seed_mode)
    tree = run_rds(net, cfg, np.random.default_rng(a.seed))
    write_tree(tree, a.out)
    return 0


def cmd_simulate_data(a) -> int:
    if a.network:
        net = _load_network(a.network, a.nodes)
    else:
        net = generate_population(ErgmConfig(gwd_coefficient=-1.5), a.seed)
    params = DgpParams(beta0=a.beta0, beta1=a.beta1, gamma=a.gamma, sigma2=a.sigma2, rho=a.rho, link=a.link)
    cov = CovariateSpec(degree_correlation=a.rho_d)
    if a.link == "logit" and a.target_prevalence is not None:
        study = StudyConfig(dgp=params, covariate=cov, target_prevalence=a.target_prevalence, master_seed=a.seed)
        params = cell_params(study, DataCell(a.fraction, a.rho, a.rho_d, a.link))
        log.info("calibrated intercept %.4f", params.beta0)
    ss = np.random.SeedSequence(a.seed).spawn(3)
    data, _ = simulate_dataset(net, params, cov, RdsConfig(a.seeds, a.coupons, a.fraction),
                               *(np.random.default_rng(s) for s in ss))
    write_dataset(data, a.out)
    return 0


def cmd_weights(a) -> int:
    tree, _ = read_tree(a.input)
    scheme = _scheme(a.scheme, a.pop_size_variant)
    data = {"degree": tree.degree}
    wv_weight = _weights_for(data, scheme, a.pop_size, a.seed, a.draws)
    rows = [[int(i), _num(1.0 / w), _num(w)] for i, w in zip(tree.node_id, wv_weight)]
    _write_rows(a.out, ["node_id", "pi_hat", "weight"], rows)
    return 0


def _spec(a) -> ModelSpec:
    return ModelSpec(link=a.link, clustering=a.cluster, weight_scheme=_scheme(a.scheme, a.pop_size_variant),
                     include_homophily_term=a.homophily_term)


def cmd_fit(a) -> int:
    data = read_dataset(a.input)
    spec = _spec(a)
    data["weight"] = _weights_for(data, spec.weight_scheme, a.pop_size, a.seed, a.draws)
    fit = fit_model(data, spec)
    ci = wald_ci(fit, a.level)
    rows = [[name, _num(est), _num(se), _num(lo), _num(hi)]
            for name, est, se, (lo, hi) in zip(fit.names, fit.coef, fit.se, ci)]
    rows.append(["sigma0", _num(fit.sigma0), "", "", ""])
    rows.append(["ICC", _num(fit.icc), "", "", ""])
    _write_rows(a.out, ["term", "estimate", "se", "ci_lo", "ci_hi"], rows)
    return 0 if fit.converged else 2


def cmd_bootstrap(a) -> int:
    data = read_dataset(a.input)
    tree = tree_from_dataset(data)
    spec = _spec(a)
    data["weight"] = _weights_for(data, spec.weight_scheme, a.pop_size, a.seed, a.draws)
    fit = fit_model(data, spec)
    cfg = BootstrapConfig(a.method, a.B, a.level, a.seed, neighborhood_variant=a.neighborhood_variant)
    res = bootstrap_fit(data, tree, spec, cfg, refitter=default_refitter(a.pop_size, draws=a.draws))
    rows = [[name, _num(est), _num(se), _num(lo), _num(hi), res.failed_replicates]
            for name, est, se, (lo, hi) in zip(res.names, fit.coef, res.se, res.ci)]
    _write_rows(a.out, ["term", "estimate", "se_boot", "ci_lo", "ci_hi", "failed"], rows)
    if res.flagged:
        log.warning("bootstrap flagged: %d of %d replicates failed", res.failed_replicates, a.B)
        return 1
    return 0


def cmd_study(a) -> int:
    cfg = StudyConfig.from_file(a.config)
    if a.seed is not None:
        cfg = replace(cfg, master_seed=a.seed)
    if a.replicates is not None:
        cfg = replace(cfg, replicates=a.replicates)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    report = run_study(cfg, threads=a.threads, progress=True)
    write_report(report, out / "report.csv")
    flagged = [r for r in report.rows if r["flagged"]]
    for r in flagged:
        log.warning("flagged cell: %s", {k: r[k] for k in ("f", "rho", "rho_d", "link", "clustering", "scheme")})
    return 1 if flagged else 0


# ---------------------------------------------------------------- parser


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="dataset CSV (node_id,cluster_id,seed_id,recruiter_id,wave,degree,x,y)")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.add_argument("--link", choices=("identity", "log", "logit"), default="identity")
    p.add_argument("--cluster", choices=("seed", "recruiter"), default="seed")
    p.add_argument("--scheme", choices=("none", "rds2", "ss"), default="none")
    p.add_argument("--pop-size", type=int)
    p.add_argument("--pop-size-variant", choices=("true", "under", "over"), default="true")
    p.add_argument("--homophily-term", action="store_true")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--draws", type=int, default=2000, help="successive-sampling draws per weight iteration")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdsreg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a clustered population network")
    p.add_argument("--out", required=True, help="edge list CSV; *_nodes.csv and *_config.json written alongside")
    p.add_argument("--population-size", type=int, default=1000)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--density", type=float, default=0.01)
    p.add_argument("--gwd", type=float, default=-1.5)
    p.add_argument("--decay", type=float, default=3.0)
    p.add_argument("--max-retries", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sample", help="run RDS recruitment on a network")
    p.add_argument("network", help="edge list CSV")
    p.add_argument("--nodes", help="node companion CSV (default: <network>_nodes.csv if present)")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--coupons", type=int, default=3)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--seed-mode", choices=("cluster", "uniform"), default="cluster")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("simulate-data", help="draw outcomes on a network and sample them by RDS")
    p.add_argument("--network", help="edge list CSV (default: generate one from --seed)")
    p.add_argument("--nodes")
    p.add_argument("--out", required=True)
    p.add_argument("--link", choices=("identity", "log", "logit"), default="identity")
    p.add_argument("--beta0", type=float, default=0.0)
    p.add_argument("--beta1", type=float, default=2.0)
    p.add_argument("--gamma", type=float, default=1.5)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--rho-d", type=float, default=0.0)
    p.add_argument("--target-prevalence", type=float, default=0.3,
                   help="logit only: calibrate the intercept to this prevalence")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--coupons", type=int, default=3)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate_data)

    p = sub.add_parser("weights", help="design weights for a recruitment tree")
    p.add_argument("input", help="recruitment-tree or dataset CSV")
    p.add_argument("--out")
    p.add_argument("--scheme", choices=("none", "rds2", "ss"), default="rds2")
    p.add_argument("--pop-size", type=int)
    p.add_argument("--pop-size-variant", choices=("true", "under", "over"), default="true")
    p.add_argument("--draws", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("fit", help="fit a weighted random-intercept regression")
    _model_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bootstrap", help="tree or neighbourhood bootstrap of a fit")
    _model_flags(p)
    p.add_argument("--method", choices=("tree", "neighborhood"), default="neighborhood")
    p.add_argument("--B", type=int, default=500)
    p.add_argument("--neighborhood-variant", choices=("size_matched", "literal"), default="size_matched")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("study", help="run a replication study from a config file")
    p.add_argument("config", help="JSON or flat key = value config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--replicates", type=int, help="override replicates")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", UserWarning)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
