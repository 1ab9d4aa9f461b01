import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from regimeml.switching_model import (
    ObservationSeries,
    RegimeKernel,
    SwitchingArModel,
    ThetaVector,
    emission_log_density,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
    simulate,
    stationary_regime_dist,
    transition_log_density,
    validate_model,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def test_uniform_kernel_constants():
    rep = validate_model(SwitchingArModel(np.full((2, 2), 0.5), [[0.0], [1.0]], [1.0, 1.0]))
    assert rep.ok
    assert rep.sigma_minus == pytest.approx(1.0)
    assert rep.sigma_plus == pytest.approx(1.0)
    assert rep.rho == pytest.approx(0.0)


def test_asymmetric_kernel_constants(two_state):
    rep = validate_model(two_state)
    assert rep.sigma_minus == pytest.approx(0.2)
    assert rep.sigma_plus == pytest.approx(1.8)
    assert rep.rho == pytest.approx(1 - 1 / 9)


def test_bad_row_sum_reported_not_raised():
    rep = validate_model(SwitchingArModel([[0.7, 0.2], [0.5, 0.5]], [[0.0], [0.0]], [1.0, 1.0]))
    assert not rep.ok
    assert any("row" in m for m in rep.messages)


def test_nonpositive_sigma_reported():
    rep = validate_model(SwitchingArModel([[0.5, 0.5], [0.5, 0.5]], [[0.0], [0.0]], [1.0, -1.0]))
    assert not rep.ok


def test_transition_log_density_values(two_state):
    uniform = SwitchingArModel(np.full((2, 2), 0.5), [[0.0], [0.0]], [1.0, 1.0])
    assert transition_log_density(uniform, 0, 1) == pytest.approx(0.0)
    # rows index the current regime: 0 -> 1 has probability 0.1, 1 -> 0 has 0.2
    assert transition_log_density(two_state, 0, 1) == pytest.approx(math.log(0.2))
    assert transition_log_density(two_state, 1, 0) == pytest.approx(math.log(0.4))
    with pytest.raises(IndexError):
        transition_log_density(two_state, 0, 2)


def test_transition_density_averages_to_one(two_state):
    for x in range(2):
        avg = np.mean([math.exp(transition_log_density(two_state, x, j)) for j in range(2)])
        assert abs(avg - 1) < 1e-12


def test_emission_density_examples():
    m0 = SwitchingArModel([[1.0]], [[0.0]], [1.0])
    assert emission_log_density(m0, [], 0, 0.0) == pytest.approx(-HALF_LOG_2PI)
    m1 = SwitchingArModel([[1.0]], [[0.0, 1.0]], [1.0])
    assert emission_log_density(m1, [2.0], 0, 2.0) == pytest.approx(-HALF_LOG_2PI)
    with pytest.raises(ValueError):
        emission_log_density(m1, [], 0, 2.0)


def test_emission_density_integrates_to_one(two_state):
    f = lambda y: math.exp(emission_log_density(two_state, [0.7], 1, y))
    mass, _ = integrate.quad(f, -np.inf, np.inf)
    assert abs(mass - 1) < 1e-8


def test_simulate_deterministic(two_state):
    a = simulate(two_state, 50, 0, seed=3)
    b = simulate(two_state, 50, 0, seed=3)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1].values, b[1].values)


def test_sticky_kernel_switch_rate():
    q = np.array([[0.999, 0.001], [0.001, 0.999]])
    xs, _ = simulate(SwitchingArModel(q, [[0.0], [1.0]], [1.0, 1.0]), 100_000, 0, seed=1)
    rate = np.mean(xs[1:] != xs[:-1])
    se = math.sqrt(0.001 * 0.999 / 1e5)
    assert abs(rate - 0.001) < 3 * se


def test_uniform_kernel_frequencies():
    xs, _ = simulate(SwitchingArModel(np.full((2, 2), 0.5), [[0.0], [1.0]], [1.0, 1.0]), 100_000, 0, seed=2)
    assert abs(xs.mean() - 0.5) < 3 * math.sqrt(0.25 / 1e5)


def test_simulated_marginal_matches_stationary(two_state):
    xs, _ = simulate(two_state, 100_000, 0, seed=5)
    pi = stationary_regime_dist(two_state.kernel)
    # regime chain autocorrelation is 1 - 0.1 - 0.2 = 0.7, inflating the variance by (1 + 0.7) / (1 - 0.7)
    se = math.sqrt(pi[1] * pi[0] / 1e5 * 1.7 / 0.3)
    assert abs(xs.mean() - pi[1]) < 3 * se


def test_stationary_distribution_examples(two_state):
    assert np.allclose(stationary_regime_dist(np.full((2, 2), 0.5)), [0.5, 0.5])
    assert np.allclose(stationary_regime_dist(two_state.kernel), [2 / 3, 1 / 3], atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_stationary_residual(d, seed):
    q = np.random.default_rng(seed).dirichlet(np.ones(d), size=d) + 1e-3
    q /= q.sum(axis=1, keepdims=True)
    pi = stationary_regime_dist(RegimeKernel(q))
    assert np.abs(pi @ q - pi).max() < 1e-12
    assert abs(pi.sum() - 1) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_theta_round_trip(d, s, seed):
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.ones(d), size=d) + 1e-6
    q /= q.sum(axis=1, keepdims=True)
    model = SwitchingArModel(q, rng.normal(size=(d, s + 1)), rng.uniform(0.1, 3, d))
    back = ThetaVector.from_model(model).to_model()
    assert np.abs(back.kernel.q - model.kernel.q).max() < 1e-12
    assert np.abs(back.ar - model.ar).max() < 1e-12
    assert np.abs(back.sigma - model.sigma).max() < 1e-12
    assert back.kernel.is_valid()


def test_rho_in_unit_interval_for_positive_kernels():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = int(rng.integers(1, 6))
        q = rng.dirichlet(np.ones(d), size=d) + 1e-9
        q /= q.sum(axis=1, keepdims=True)
        assert 0 <= RegimeKernel(q).rho < 1


def test_lag_window():
    series = ObservationSeries([1.0, 2.0, 3.0, 4.0], 2)
    assert series.n == 2
    assert np.array_equal(series.lag_window(0), [2.0, 1.0])
    assert np.array_equal(series.lag_window(2), [4.0, 3.0])
    with pytest.raises(ValueError):
        ObservationSeries([1.0], 2)


def test_model_file_round_trip(tmp_path, two_state):
    path = tmp_path / "m.json"
    save_model(two_state, path)
    back = load_model(path)
    assert np.array_equal(back.kernel.q, two_state.kernel.q)
    assert set(json.loads(path.read_text())) == {"d_x", "s", "kernel", "ar", "sigma"}
    bad = model_to_dict(two_state) | {"extra": 1}
    with pytest.raises(ValueError, match="unknown"):
        model_from_dict(bad)
