import itertools
import math

import numpy as np
import pytest

from rdsreg.ergm import (CalibrationError, ErgmConfig, ergm_statistics, generate_population, gwd_weights,
                         simulate_cluster)
from rdsreg.network import ClusterGraph, density


def test_statistics_examples():
    s = ergm_statistics(ClusterGraph.from_edges(5))
    assert s.edge_count == 0 and s.gwd_value == 0
    assert ergm_statistics(ClusterGraph.from_edges(2, [(0, 1)]), decay=0.0).gwd_value == pytest.approx(2.0)
    tri = ClusterGraph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    assert ergm_statistics(tri, attr=[1, 1, 1]).homophily_matches == 3
    assert ergm_statistics(tri).homophily_matches == 0


def test_gwd_formula_matches_definition():
    d = 1.7
    w = gwd_weights(6, d)
    for k in range(7):
        assert w[k] == pytest.approx(math.exp(d) * (1 - (1 - math.exp(-d)) ** k))


def test_config_validation():
    with pytest.raises(ValueError):
        ErgmConfig(population_size=1001)
    with pytest.raises(ValueError):
        ErgmConfig(target_density=0.0005)
    with pytest.raises(ValueError):
        ErgmConfig(gwd_decay=-1)


def _exact_edge_distribution(theta, gwd_coef, decay):
    """Enumerate all 64 graphs on 4 nodes under exp(theta e + gwd_coef u)."""
    pairs = list(itertools.combinations(range(4), 2))
    probs = np.zeros(7)
    for mask in range(64):
        edges = [p for i, p in enumerate(pairs) if mask >> i & 1]
        s = ergm_statistics(ClusterGraph.from_edges(4, edges), decay=decay)
        probs[s.edge_count] += math.exp(theta * s.edge_count + gwd_coef * s.gwd_value)
    return probs / probs.sum()


@pytest.mark.parametrize("theta,gwd_coef", [(-0.4, 0.0), (0.3, -0.8)])
def test_mh_matches_enumeration(theta, gwd_coef):
    decay = 1.0
    n_rec, thin = 100_000, 12
    _, trace = simulate_cluster(4, theta, gwd_coef, decay, np.random.default_rng(7),
                                steps=n_rec * thin + 1000, record_every=thin, n_records=n_rec + 80)
    emp = np.bincount(trace[80:], minlength=7) / (len(trace) - 80)
    exact = _exact_edge_distribution(theta, gwd_coef, decay)
    assert 0.5 * np.abs(emp - exact).sum() < 0.05
    if gwd_coef == 0.0:
        p = 1 / (1 + math.exp(-theta))
        binom = np.array([math.comb(6, k) * p ** k * (1 - p) ** (6 - k) for k in range(7)])
        np.testing.assert_allclose(exact, binom, atol=1e-12)


def test_generate_paper_configuration_density():
    net = generate_population(ErgmConfig(), 5)
    assert len(net.clusters) == 10 and all(c.size == 100 for c in net.clusters)
    assert 0.009 <= density(net) <= 0.011


def test_generate_deterministic():
    cfg = ErgmConfig(gwd_coefficient=-1.5)
    a, b = generate_population(cfg, 3), generate_population(cfg, 3)
    assert all(x == y for x, y in zip(a.clusters, b.clusters))
    c = generate_population(cfg, 4)
    assert any(x != y for x, y in zip(a.clusters, c.clusters))


def test_negative_gwd_spreads_degrees():
    var = {}
    for g in (-1.5, 0.0):
        var[g] = np.mean([np.var(generate_population(ErgmConfig(gwd_coefficient=g), 100 + s).degrees)
                          for s in range(20)])
    assert var[-1.5] > var[0.0]


def test_density_band_every_output():
    cfg = ErgmConfig(gwd_coefficient=-1.5)
    for s in range(5):
        assert abs(density(generate_population(cfg, s)) / cfg.target_density - 1) <= cfg.density_band


def test_calibration_failure_reports_density():
    cfg = ErgmConfig(population_size=40, num_clusters=2, target_density=0.2, gwd_coefficient=0.0,
                     density_band=1e-9, max_retries=2)
    with pytest.raises(CalibrationError, match="density"):
        generate_population(cfg, 1)
