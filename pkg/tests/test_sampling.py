import numpy as np
import pytest

from rdsreg.network import ClusterGraph, PopulationNetwork
from rdsreg.sampling import (RdsConfig, observed_adjacency, read_tree, run_rds, select_seeds, tree_graph,
                             write_tree)

from conftest import make_tree


def check_tree(tree, net, coupons):
    assert len(np.unique(tree.node_id)) == tree.n
    pos = {int(v): i for i, v in enumerate(tree.node_id)}
    for i in range(tree.n):
        r = tree.recruiter_id[i]
        if r < 0:
            assert tree.wave[i] == 0 and tree.seed_id[i] == tree.node_id[i]
            continue
        p = pos[int(r)]
        assert p < i
        assert tree.wave[i] == tree.wave[p] + 1
        assert tree.seed_id[i] == tree.seed_id[p]
        assert net.locate(int(r))[0] == net.locate(int(tree.node_id[i]))[0]
        assert int(tree.node_id[i]) in set(net.neighbors(int(r)).tolist())
    counts = np.bincount(tree.parent_rows()[~tree.is_seed], minlength=tree.n)
    assert counts.max(initial=0) <= coupons
    assert np.array_equal(tree.degree, net.degrees[tree.node_id])


def test_paper_configuration(population):
    tree = run_rds(population, RdsConfig(10, 3, 0.2), np.random.default_rng(1))
    assert tree.n == 200
    check_tree(tree, population, 3)
    assert len(tree.tree_edges) == tree.n - tree.n_seeds


@pytest.mark.parametrize("f,c", [(0.05, 3), (0.4, 1), (0.8, 3), (0.3, 0)])
def test_invariants_across_configs(population, f, c):
    tree = run_rds(population, RdsConfig(10, c, f), np.random.default_rng(2))
    assert tree.n == RdsConfig(10, c, f).target_size(1000)
    check_tree(tree, population, c)
    if c == 0:
        assert tree.is_seed.all()


def test_seeds_only_when_target_equals_seeds(population):
    tree = run_rds(population, RdsConfig(10, 3, 0.01), np.random.default_rng(0))
    assert tree.n == 10 and np.all(tree.wave == 0)


def test_census(population):
    tree = run_rds(population, RdsConfig(10, 3, 1.0), np.random.default_rng(0))
    assert np.array_equal(np.sort(tree.node_id), np.arange(1000))


def test_select_seeds(population):
    seeds = select_seeds(population, 10, np.random.default_rng(5))
    assert sorted(population.cluster_ids[seeds]) == list(range(10))
    assert len(select_seeds(population, 1, np.random.default_rng(5))) == 1
    assert select_seeds(population, 10, np.random.default_rng(9)) == select_seeds(population, 10,
                                                                                  np.random.default_rng(9))
    many = select_seeds(population, 15, np.random.default_rng(1))
    assert len(set(many)) == 15
    assert np.bincount(population.cluster_ids[many]).max() == 2


def test_single_seed_tree_count(population):
    tree = run_rds(population, RdsConfig(1, 3, 0.05), np.random.default_rng(3))
    assert tree.is_seed[0] and tree.n == 50


def test_replenishment_on_dead_chains():
    # ten isolated pairs: each chain dies after one recruit
    net = PopulationNetwork([ClusterGraph.from_edges(2, [(0, 1)]) for _ in range(10)])
    tree = run_rds(net, RdsConfig(2, 3, 1.0), np.random.default_rng(0))
    assert tree.n == 20 and tree.n_seeds == 10
    check_tree(tree, net, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        RdsConfig(0, 3, 0.2)
    with pytest.raises(ValueError):
        RdsConfig(10, 3, 0.0)
    with pytest.raises(ValueError):
        RdsConfig(10, 3, 0.005).target_size(1000)


def test_deterministic(population):
    a = run_rds(population, RdsConfig(10, 3, 0.2), np.random.default_rng(11))
    b = run_rds(population, RdsConfig(10, 3, 0.2), np.random.default_rng(11))
    assert np.array_equal(a.node_id, b.node_id) and np.array_equal(a.recruiter_id, b.recruiter_id)


def test_observed_adjacency_examples(population):
    seeds_only = make_tree([-1, -1, -1])
    assert sum(g.n_edges for g, _ in observed_adjacency(seeds_only).values()) == 0
    chain = make_tree([-1, 0, 1])
    (g, nodes), = observed_adjacency(chain).values()
    assert g.n_edges == 2 and g.has_edge(0, 1) and g.has_edge(1, 2) and not g.has_edge(0, 2)
    tree = run_rds(population, RdsConfig(10, 3, 0.3), np.random.default_rng(4))
    assert tree_graph(tree).n_edges == tree.n - tree.n_seeds
    assert sum(g.n_edges for g, _ in observed_adjacency(tree).values()) == tree.n - tree.n_seeds


def test_tree_file_round_trip(tmp_path, population):
    tree = run_rds(population, RdsConfig(10, 3, 0.2), np.random.default_rng(6))
    path = tmp_path / "tree.csv"
    write_tree(tree, path, {"x": np.linspace(0, 1, tree.n)})
    lines = path.read_text().splitlines()
    assert lines[0] == "node_id,cluster_id,seed_id,recruiter_id,wave,degree,x"
    assert lines[1].split(",")[3] == ""
    back, extra = read_tree(path)
    for c in ("node_id", "cluster_id", "seed_id", "recruiter_id", "wave", "degree"):
        assert np.array_equal(getattr(back, c), getattr(tree, c))
    np.testing.assert_array_equal(extra["x"], np.linspace(0, 1, tree.n))
