import warnings

import numpy as np
import pytest

from rdsreg.ergm import ErgmConfig, generate_population
from rdsreg.sampling import RecruitmentTree


def make_tree(recruiter, degree=None, node_id=None) -> RecruitmentTree:
    """Tree from a recruiter-row list (-1 for seeds); rows must be in recruitment order."""
    recruiter = np.asarray(recruiter, dtype=np.int64)
    n = len(recruiter)
    node = np.arange(n, dtype=np.int64) if node_id is None else np.asarray(node_id, dtype=np.int64)
    seed = np.empty(n, dtype=np.int64)
    wave = np.empty(n, dtype=np.int64)
    rec_id = np.full(n, -1, dtype=np.int64)
    for i, r in enumerate(recruiter):
        if r < 0:
            seed[i], wave[i] = node[i], 0
        else:
            seed[i], wave[i], rec_id[i] = seed[r], wave[r] + 1, node[r]
    deg = np.ones(n, dtype=np.int64) if degree is None else np.asarray(degree, dtype=np.int64)
    return RecruitmentTree(node, np.zeros(n, dtype=np.int64), seed, rec_id, wave, deg)


@pytest.fixture(scope="session")
def population():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_population(ErgmConfig(gwd_coefficient=-1.5), 2024)
