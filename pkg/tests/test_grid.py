import math

import numpy as np
import pytest
from scipy import stats

from regimeml import doa, grid
from regimeml.doa import DoaParams
from regimeml.inference_exact import fd_hessian

THETA = DoaParams(0.25, 0.64, 0.36)


@pytest.fixture(scope="module")
def data():
    return doa.simulate_doa(THETA, 40, 4, seed=21)


def test_transition_rows_normalized():
    m = grid.GridDoaModel(THETA, 64)
    q = m.transition_matrix()
    assert np.allclose(q.sum(axis=1), 1, atol=1e-13)
    assert np.allclose(q, q.T, atol=1e-15)
    with pytest.raises(ValueError):
        m.node_index(0.1)
    assert m.node_index(math.pi) == 32


def test_em_is_monotone(data):
    steps = grid.grid_em(data.snapshots, math.pi, DoaParams(0.6, 0.3, 0.8), 12, n_bins=128)
    ll = np.array([s.loglik for s in steps])
    assert np.all(np.diff(ll) >= -1e-9)
    assert ll[-1] > ll[0]


def test_grid_louis_matches_fd(data):
    m = grid.GridDoaModel(THETA, 128)
    info = grid.grid_louis_information(m, data.snapshots)
    f = lambda th: grid.grid_log_likelihood(grid.GridDoaModel(DoaParams(*th), 128), data.snapshots)
    fd = -fd_hessian(f, THETA.as_array(), step=1e-4)
    assert np.linalg.norm(info.matrix - fd) / np.linalg.norm(fd) < 1e-4


def test_posterior_sampler_matches_smoothed_marginals(data):
    m = grid.GridDoaModel(THETA, 64)
    draws = grid.sample_posterior_paths(m, data.snapshots, math.pi, 20_000, np.random.default_rng(0), jitter=False)
    _, marg = grid.grid_marginal_cdf(m, data.snapshots, math.pi)
    for k in (1, 20, 40):
        idx = np.rint(draws[:, k - 1] / (2 * math.pi) * 64).astype(int) % 64
        freq = np.bincount(idx, minlength=64) / idx.size
        se = np.sqrt(marg[k] * (1 - marg[k]) / idx.size)
        assert np.all(np.abs(freq - marg[k]) <= 5 * se + 5 / idx.size)


def test_marginal_cdf_is_a_cdf(data):
    m = grid.GridDoaModel(THETA, 64)
    cdf, _ = grid.grid_marginal_cdf(m, data.snapshots, math.pi)
    x = np.linspace(0, 2 * math.pi, 400, endpoint=False)
    c = cdf(5, x)
    assert np.all(np.diff(c) >= -1e-15) and 0 <= c[0] and c[-1] <= 1 + 1e-12


def test_jittered_draws_follow_marginal_cdf(data):
    m = grid.GridDoaModel(THETA, 64)
    draws = grid.sample_posterior_paths(m, data.snapshots, math.pi, 20_000, np.random.default_rng(1))
    cdf, _ = grid.grid_marginal_cdf(m, data.snapshots, math.pi)
    for k in (1, 17, 40):
        assert stats.kstest(draws[:, k - 1], lambda x: cdf(k, x)).statistic < 0.02
