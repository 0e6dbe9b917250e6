import csv
import json
import warnings

import numpy as np
import pytest

from rdsreg.cli import main
from rdsreg.ergm import ErgmConfig
from rdsreg.study import (REPORT_COLUMNS, SimReport, StudyConfig, data_cells, parse_flat_config, read_dataset,
                          read_report, rng_stream, run_replicate, run_study, write_report)


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def tiny(**kw):
    base = dict(network=ErgmConfig(200, 4, 0.05, gwd_coefficient=-1.5), num_seeds=4, sample_fractions=(0.25,),
                replicates=2, bootstrap_replicates=10, clusterings=("seed",))
    base.update(kw)
    return StudyConfig(**base)


FLAT = """
# tiny study
replicates = 2
master_seed = 7
links = identity, logit
clusterings = seed
schemes = unweighted, rds2
network.population_size = 200
network.num_clusters = 4
network.target_density = 0.05
network.gwd_coefficient = -1.5
dgp.beta1 = 2.0
covariate.sd = 1.5
fixed_network = true
"""


def test_parse_flat_config():
    cfg = parse_flat_config(FLAT)
    assert cfg["links"] == ["identity", "logit"]
    assert cfg["network"]["gwd_coefficient"] == -1.5
    assert cfg["fixed_network"] is True
    with pytest.raises(ValueError, match="line 1"):
        parse_flat_config("no equals sign")


def test_config_files(tmp_path):
    flat = tmp_path / "study.cfg"
    flat.write_text(FLAT)
    cfg = StudyConfig.from_file(flat)
    assert cfg.links == ("identity", "logit") and cfg.network.population_size == 200
    js = tmp_path / "study.json"
    js.write_text(json.dumps(cfg.to_dict()))
    assert StudyConfig.from_file(js) == cfg


def test_partial_network_block_keeps_study_defaults():
    cfg = StudyConfig.from_mapping({"network": {"population_size": 500, "num_clusters": 5}})
    assert cfg.network.gwd_coefficient == StudyConfig().network.gwd_coefficient
    assert cfg.network.population_size == 500


def test_config_validation():
    with pytest.raises(ValueError, match="unknown"):
        StudyConfig.from_mapping({"replicates": 2, "colour": "red"})
    with pytest.raises(ValueError):
        StudyConfig(replicates=0)
    with pytest.raises(ValueError):
        StudyConfig(schemes=("weird",))
    with pytest.raises(ValueError):
        StudyConfig(links=("probit",))


def test_streams_depend_on_labels_only():
    a = rng_stream(1, "effects", 0.05, 0.0, "identity", 3).random(4)
    b = rng_stream(1, "effects", 0.05, 0.0, "identity", 3).random(4)
    c = rng_stream(1, "effects", 0.05, 0.0, "identity", 4).random(4)
    d = rng_stream(2, "effects", 0.05, 0.0, "identity", 3).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_single_replicate_report():
    report = run_study(tiny(replicates=1, bootstrap_methods=()))
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row["CI"] in (0.0, 1.0)
    assert row["R_effective"] == 1 and not row["flagged"]
    assert np.isnan(row["TCI"]) and np.isnan(row["NCI"])


def test_report_invariants_and_round_trip(tmp_path):
    report = run_study(tiny(schemes=("unweighted", "rds2")))
    assert len(report.rows) == 2 and len(report.records) == 4
    for row in report.rows:
        assert row["RMSE"] >= 0
        for k in ("CI", "TCI", "NCI"):
            assert 0 <= row[k] <= 1
            p = row[k]
            assert row[f"{k}_mcse"] == pytest.approx(np.sqrt(p * (1 - p) / row["R_effective"]))
    rounded, full = write_report(report, tmp_path / "report.csv")
    assert rounded.exists() and full.exists() and (tmp_path / "report_replicates.csv").exists()
    back = read_report(full)
    assert len(back.rows) == len(report.rows)
    for a, b in zip(report.rows, back.rows):
        for k in REPORT_COLUMNS:
            if isinstance(a[k], float) and np.isnan(a[k]):
                assert np.isnan(b[k])
            else:
                assert a[k] == b[k], k
    with open(rounded) as fh:
        first = next(csv.DictReader(fh))
    assert len(first["RB"].split(".")[-1]) == 2


def test_empty_report_is_header_only(tmp_path):
    rounded, full = write_report(SimReport([]), tmp_path / "empty.csv")
    for p in (rounded, full):
        assert p.read_text().strip() == ",".join(REPORT_COLUMNS)


def test_write_report_error_names_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        write_report(SimReport([]), tmp_path / "missing" / "r.csv")


def test_determinism_and_order_independence(tmp_path):
    cfg = tiny(sample_fractions=(0.25, 0.3))
    a = run_study(cfg)
    b = run_study(cfg)
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    write_report(a, pa)
    write_report(b, pb)
    assert (tmp_path / "a_full.csv").read_bytes() == (tmp_path / "b_full.csv").read_bytes()
    # a replicate computed alone matches the same replicate inside the full run
    cell = data_cells(cfg)[1]
    alone = run_replicate(cfg, cell, 1)
    inside = [r for r in a.records if r["f"] == cell.f and r["replicate"] == 1]
    assert [r["estimate"] for r in alone] == [r["estimate"] for r in inside]


def test_failures_reduce_effective_replicates():
    report = run_study(tiny(replicates=2, links=("logit",), bootstrap_methods=()))
    row = report.rows[0]
    assert row["R_effective"] <= 2
    assert row["flagged"] == (row["R_effective"] < 2)


# ---------------------------------------------------------------- CLI


def test_cli_pipeline(tmp_path):
    net = tmp_path / "net.csv"
    assert main(["generate", "--out", str(net), "--population-size", "200", "--clusters", "4",
                 "--density", "0.05", "--seed", "3"]) == 0
    assert (tmp_path / "net_nodes.csv").exists() and (tmp_path / "net_config.json").exists()
    tree = tmp_path / "tree.csv"
    assert main(["sample", str(net), "--out", str(tree), "--seeds", "4", "--fraction", "0.25", "--seed", "1"]) == 0
    wts = tmp_path / "w.csv"
    assert main(["weights", str(tree), "--out", str(wts), "--scheme", "ss", "--pop-size", "200",
                 "--draws", "200"]) == 0
    with open(wts) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50 and all(float(r["weight"]) > 0 for r in rows)

    data = tmp_path / "data.csv"
    assert main(["simulate-data", "--network", str(net), "--out", str(data), "--seeds", "4",
                 "--fraction", "0.25", "--seed", "2"]) == 0
    cols = read_dataset(data)
    assert len(cols["y"]) == 50
    fit = tmp_path / "fit.csv"
    assert main(["fit", str(data), "--out", str(fit), "--scheme", "rds2"]) == 0
    with open(fit) as fh:
        terms = [r["term"] for r in csv.DictReader(fh)]
    assert terms == ["intercept", "x", "sigma0", "ICC"]
    boot = tmp_path / "boot.csv"
    assert main(["bootstrap", str(data), "--out", str(boot), "--method", "tree", "--B", "20"]) == 0
    with open(boot) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["term"] for r in rows] == ["intercept", "x"]
    assert all(float(r["ci_lo"]) <= float(r["ci_hi"]) for r in rows)


def test_cli_study(tmp_path):
    cfg = tmp_path / "study.cfg"
    cfg.write_text(FLAT.replace("links = identity, logit", "links = identity")
                   + "bootstrap_replicates = 10\nnum_seeds = 4\nsample_fractions = 0.25\n")
    out = tmp_path / "out"
    assert main(["study", str(cfg), "--out", str(out), "--replicates", "2", "--seed", "5"]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["replicates"] == 2 and echoed["master_seed"] == 5
    report = read_report(out / "report_full.csv")
    assert len(report.rows) == 2


def test_cli_errors(tmp_path):
    assert main(["fit", str(tmp_path / "absent.csv")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("replicates = 0\n")
    assert main(["study", str(bad), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit):
        main(["nonsense"])
