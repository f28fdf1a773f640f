import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.errors import EmptySampleError
from src.experts import uniform_allocation
from src.netmodel import SystemConfig, derive_rng, generate_batch, generate_state, joint_metrics
from src.objectives import UtilitySpec, evaluate_utility
from src.uncertainty import (
    ErrorModel,
    batch_utility,
    draw_realizations,
    empirical_quantile,
    nearest_rank,
    robust_utility,
    sample_perturbed_state,
    sample_realizations,
    utility_samples,
)


@pytest.fixture
def config():
    return SystemConfig()


def sort_oracle(samples, gamma, tail):
    level = gamma if tail == "lower" else 1.0 - gamma
    m = len(samples)
    rank = min(max(int(np.ceil(np.round(level * m, 9))), 1), m)
    return sorted(samples)[rank - 1]


@pytest.mark.parametrize("tail", ["lower", "upper"])
@pytest.mark.parametrize("gamma", [0.01, 0.05, 0.5])
def test_quantile_matches_sort_oracle(tail, gamma):
    """
    Test 1: Nearest-rank quantile equals the sort-based oracle on 1,000 random sample sets.
    """
    print(f"\n🔹 Test: Quantile Oracle (gamma={gamma}, {tail})")
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        m = int(rng.integers(1, 400))
        samples = rng.normal(size=m) * rng.uniform(0.1, 100.0)
        assert empirical_quantile(samples, gamma, tail) == sort_oracle(list(samples), gamma, tail)


@pytest.mark.parametrize("m, gamma, tail, rank", [
    (200, 0.05, "lower", 10),
    (200, 0.05, "upper", 190),
    (100, 0.07, "lower", 7),
    (1, 0.05, "lower", 1),
    (1, 0.05, "upper", 1),
    (10, 0.01, "lower", 1),
    (10, 0.5, "upper", 5),
])
def test_nearest_rank(m, gamma, tail, rank):
    """
    Test 2: Ranks for the usual sample sizes, including float-noise cases like 0.07 * 100.
    """
    print(f"\n🔹 Test: Nearest Rank m={m} gamma={gamma} {tail}")
    assert nearest_rank(m, gamma, tail) == rank


def test_quantile_batched_and_empty():
    """
    Test 3: Quantiles run along the last axis; empty sample sets raise.
    """
    print("\n🔹 Test: Batched Quantile")
    values = np.arange(40, dtype=float).reshape(2, 20)
    np.testing.assert_array_equal(empirical_quantile(values, 0.05, "lower"), [0.0, 20.0])
    np.testing.assert_array_equal(empirical_quantile(values, 0.05, "upper"), [18.0, 38.0])
    with pytest.raises(EmptySampleError):
        empirical_quantile(np.array([]), 0.05, "lower")
    with pytest.raises(EmptySampleError):
        nearest_rank(0, 0.05, "lower")


def test_error_model_from_config(config):
    """
    Test 4: Variances come from the config; tails follow the objective sense unless overridden.
    """
    print("\n🔹 Test: Error Model")
    model = ErrorModel.from_config(config, m_samples=50, tail_overrides={"sumT": "lower"})
    assert model.sigma_h_sq == 0.15 and model.sigma_w_sq == 3200.0 and model.m_samples == 50
    assert model.tail_for("sumR", "maximize") == "lower"
    assert model.tail_for("maxT", "minimize") == "upper"
    assert model.tail_for("sumT", "minimize") == "lower"


def test_realization_shapes_and_statistics(config):
    """
    Test 5: Realizations gain an M axis and scatter around the estimate with sigma_h^2 / sigma_w^2.
    """
    print("\n🔹 Test: Realizations")
    model = ErrorModel.from_config(config, m_samples=500)
    batch = generate_batch(config, derive_rng(1), 8)
    h, omega = sample_realizations(batch.h_est, batch.omega_est, model, derive_rng(2))
    assert h.shape == (8, 500, 4, 4)
    assert omega.shape == (8, 500, 4)
    err = h - batch.h_est[:, None]
    assert np.mean(np.abs(err) ** 2) == pytest.approx(0.15, rel=0.05)
    assert np.all(omega >= config.omega_floor)

    state = batch.state(0)
    perturbed = sample_perturbed_state(state, model, derive_rng(3))
    np.testing.assert_array_equal(perturbed.h_est, state.h_est)
    assert perturbed.h_true.shape == state.h_true.shape


def test_robust_utility_is_a_pessimistic_quantile(config):
    """
    Test 6: The robust sum-rate sits in the lower tail of its samples, the robust max-delay in the upper tail.
    """
    print("\n🔹 Test: Robust Utility Tails")
    model = ErrorModel.from_config(config, m_samples=200)
    state = generate_state(config, derive_rng(4))
    alloc = uniform_allocation("joint", config)

    rate = UtilitySpec(family="sumR", domain="joint", robust=True)
    samples = utility_samples(rate.nominal(), state, alloc, model, config, derive_rng(5)).values
    robust = robust_utility(rate, state, alloc, model, config, derive_rng(5))
    assert robust == pytest.approx(np.sort(samples)[9])
    assert robust <= np.median(samples)

    delay = UtilitySpec(family="maxT", domain="joint", robust=True)
    samples = utility_samples(delay.nominal(), state, alloc, model, config, derive_rng(6)).values
    robust = robust_utility(delay, state, alloc, model, config, derive_rng(6))
    assert robust == pytest.approx(np.sort(samples)[189])
    assert robust >= np.median(samples)


def test_gamma_override_on_spec(config):
    """
    Test 7: A gamma on the utility spec wins over the config level.
    """
    print("\n🔹 Test: Gamma Override")
    model = ErrorModel.from_config(config, m_samples=100)
    state = generate_state(config, derive_rng(8))
    alloc = uniform_allocation("comm", config)
    spec = UtilitySpec(family="sumR", domain="comm", robust=True, gamma=0.5)
    samples = utility_samples(spec.nominal(), state, alloc, model, config, derive_rng(9)).values
    assert robust_utility(spec, state, alloc, model, config, derive_rng(9)) == pytest.approx(np.sort(samples)[49])


def test_batch_utility_shares_realizations(config):
    """
    Test 8: Batched robust utilities reuse one realization set; nominal ones need none.
    """
    print("\n🔹 Test: Batch Utility")
    model = ErrorModel.from_config(config, m_samples=64)
    batch = generate_batch(config, derive_rng(10), 5)
    alloc = uniform_allocation("joint", config, batch=(5,))
    realizations = draw_realizations(batch, model, derive_rng(11))

    spec = UtilitySpec(family="sumR", domain="joint", robust=True)
    a = batch_utility(spec, batch, alloc, config, realizations=realizations, model=model)
    b = batch_utility(spec, batch, alloc, config, realizations=realizations, model=model)
    assert a.shape == (5,)
    np.testing.assert_array_equal(a, b)

    nominal = batch_utility(spec.nominal(), batch, alloc, config)
    assert nominal.shape == (5,)
    with pytest.raises(ValueError):
        batch_utility(spec, batch, alloc, config)


@pytest.mark.parametrize("gamma", [0.05, 0.2])
def test_quantile_properties(gamma):
    """
    Test 9: Quantiles stay within the sample range, follow a constant shift, and the lower tail sits below the upper tail and the mean.
    """
    print(f"\n🔹 Test: Quantile Properties (gamma={gamma})")
    samples = np.random.default_rng(40).normal(5.0, 2.0, size=(50, 200))
    lower = empirical_quantile(samples, gamma, "lower")
    upper = empirical_quantile(samples, gamma, "upper")
    assert np.all(samples.min(axis=-1) <= lower) and np.all(upper <= samples.max(axis=-1))
    assert np.all(lower <= upper)
    assert np.all(lower <= samples.mean(axis=-1))
    for tail in ("lower", "upper"):
        np.testing.assert_allclose(
            empirical_quantile(samples + 3.25, gamma, tail), empirical_quantile(samples, gamma, tail) + 3.25, rtol=1e-12
        )


@pytest.mark.parametrize("name", ["JCC_SumR_Rob", "JCC_MaxT_Rob", "Comm_LogR_Rob"])
def test_robust_equals_nominal_without_errors(config, name):
    """
    Test 10: With zero error variances every realization is the estimate, so the robust utility is the nominal one.
    """
    print(f"\n🔹 Test: Zero-Variance Robustness ({name})")
    model = ErrorModel(sigma_h_sq=0.0, sigma_w_sq=0.0, m_samples=20)
    state = generate_state(config, derive_rng(41))
    spec = UtilitySpec.from_name(name)
    alloc = uniform_allocation(spec.domain, config)
    nominal = evaluate_utility(spec.nominal(), joint_metrics(state, alloc, config, use_true=False))
    assert robust_utility(spec, state, alloc, model, config, derive_rng(42)) == pytest.approx(nominal, rel=1e-12)


@pytest.mark.parametrize("name", ["JCC_SumR_Rob", "JCC_MaxT_Rob"])
def test_single_realization_is_its_own_quantile(config, name):
    """
    Test 11: With M = 1 the robust utility is the utility of the one realization, on either tail.
    """
    print(f"\n🔹 Test: Single Realization ({name})")
    model = ErrorModel.from_config(config, m_samples=1)
    state = generate_state(config, derive_rng(43))
    spec = UtilitySpec.from_name(name)
    alloc = uniform_allocation("joint", config)
    (only,) = utility_samples(spec.nominal(), state, alloc, model, config, derive_rng(44)).values
    assert robust_utility(spec, state, alloc, model, config, derive_rng(44)) == only
