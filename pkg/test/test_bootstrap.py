import numpy as np
import pytest
from scipy.stats import chisquare

from circuitforge.bootstrap import (
    BootstrapPlan,
    bootstrap_metric,
    bootstrap_resample,
    bootstrap_values,
    resample_pool_indices,
    summarize_bootstrap,
)


def test_single_element_pool_always_draws_zero():
    plan = BootstrapPlan(n_resamples=3, sample_size=25, seed=1)
    np.testing.assert_array_equal(bootstrap_resample(1, plan, 2), np.zeros(25))


def test_resample_is_deterministic_per_seed_and_index():
    plan = BootstrapPlan(n_resamples=5, sample_size=40, seed=11)
    first = bootstrap_resample(100, plan, 3)
    np.testing.assert_array_equal(first, bootstrap_resample(100, plan, 3))
    assert not np.array_equal(first, bootstrap_resample(100, plan, 4))
    assert not np.array_equal(first, bootstrap_resample(100, BootstrapPlan(5, 40, 12), 3))
    assert len(first) == 40
    assert first.min() >= 0 and first.max() < 100


def test_resample_index_out_of_range():
    plan = BootstrapPlan(n_resamples=2, sample_size=4)
    with pytest.raises(IndexError):
        bootstrap_resample(10, plan, 2)


def test_resample_draws_uniformly():
    plan = BootstrapPlan(n_resamples=200, sample_size=500, seed=5)
    counts = np.zeros(20)
    for r in range(plan.n_resamples):
        counts += np.bincount(bootstrap_resample(20, plan, r), minlength=20)
    assert counts.sum() == 100000
    assert chisquare(counts).pvalue > 1e-3


def test_first_pool_matches_single_resample():
    plan = BootstrapPlan(n_resamples=4, sample_size=30, seed=2)
    clean, corrupted = resample_pool_indices([50, 70], plan, 1)
    np.testing.assert_array_equal(clean, bootstrap_resample(50, plan, 1))
    assert corrupted.max() < 70 and len(corrupted) == 30


@pytest.mark.parametrize("n_resamples,sample_size", [(0, 10), (5, 1)])
def test_invalid_plan(n_resamples, sample_size):
    with pytest.raises(ValueError):
        BootstrapPlan(n_resamples, sample_size)


def test_constant_values_collapse_the_interval():
    plan = BootstrapPlan(n_resamples=10, sample_size=5)
    result = summarize_bootstrap([0.25] * 10, plan)
    assert result.mean == result.ci_low == result.ci_high == 0.25


def test_interval_brackets_the_mean_for_skewed_values():
    plan = BootstrapPlan(n_resamples=50, sample_size=5)
    result = summarize_bootstrap([0.0] * 49 + [1000.0], plan)
    assert result.ci_low <= result.mean <= result.ci_high


def test_bootstrap_mean_estimates_pool_mean():
    pool = np.arange(1000, dtype=np.float64)
    plan = BootstrapPlan(n_resamples=50, sample_size=500, seed=3)
    result = bootstrap_metric(np.mean, [pool], plan)
    # Standard error of the mean over 50 x 500 draws is about 1.83
    assert abs(result.mean - pool.mean()) < 3 * pool.std() / np.sqrt(50 * 500)
    assert result.ci_low <= result.mean <= result.ci_high


def test_interval_narrows_with_sample_size():
    pool = np.random.default_rng(0).normal(size=2000)
    small = bootstrap_metric(np.mean, [pool], BootstrapPlan(n_resamples=400, sample_size=100, seed=4))
    large = bootstrap_metric(np.mean, [pool], BootstrapPlan(n_resamples=400, sample_size=400, seed=4))
    ratio = (small.ci_high - small.ci_low) / (large.ci_high - large.ci_low)
    assert 2 / 1.5 <= ratio <= 3


def test_parallel_values_match_serial():
    pool = np.linspace(0.0, 1.0, 300)
    plan = BootstrapPlan(n_resamples=6, sample_size=20, seed=9)
    assert bootstrap_values(np.mean, [pool], plan, workers=2) == bootstrap_values(np.mean, [pool], plan)
