"""Deterministic bootstrap resampling and percentile confidence intervals."""

from dataclasses import asdict, dataclass

import numpy as np

from circuitforge.pool_util import ordered_map
from circuitforge.rng import named_rng
from circuitforge.settings import default_n_resamples, default_sample_size, default_seed


@dataclass(frozen=True)
class BootstrapPlan:
    n_resamples: int = default_n_resamples
    sample_size: int = default_sample_size
    seed: int = default_seed

    def __post_init__(self):
        if self.n_resamples < 1:
            raise ValueError(f"n_resamples must be at least 1, got {self.n_resamples}")
        if self.sample_size < 2:
            raise ValueError(f"sample_size must be at least 2, got {self.sample_size}")


@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    ci_low: float
    ci_high: float
    n_resamples: int
    sample_size: int

    def to_dict(self):
        return asdict(self)


def _check_resample_index(plan, resample_index):
    if not 0 <= resample_index < plan.n_resamples:
        raise IndexError(f"resample_index {resample_index} outside [0, {plan.n_resamples})")


def bootstrap_resample(pool_size, plan, resample_index):
    """Draws plan.sample_size indices uniformly with replacement from [0, pool_size). The result depends only on
    (plan.seed, resample_index)."""
    if pool_size < 1:
        raise ValueError(f"pool_size must be at least 1, got {pool_size}")
    _check_resample_index(plan, resample_index)
    rng = named_rng(plan.seed, "bootstrap", resample_index)
    return rng.integers(0, pool_size, size=plan.sample_size)


def resample_pool_indices(pool_sizes, plan, resample_index):
    """Draws one index array per pool from the same bootstrap stream, in pool order. The first array equals
    bootstrap_resample(pool_sizes[0], plan, resample_index)."""
    for size in pool_sizes:
        if size < 1:
            raise ValueError(f"pool sizes must be at least 1, got {pool_sizes}")
    _check_resample_index(plan, resample_index)
    rng = named_rng(plan.seed, "bootstrap", resample_index)
    return [rng.integers(0, size, size=plan.sample_size) for size in pool_sizes]


def summarize_bootstrap(values, plan):
    """Turns per-resample metric values into a mean with a 2.5/97.5 percentile interval. The interval is widened
    to contain the mean when a skewed resample distribution would otherwise leave it outside."""
    values = np.asarray(values, dtype=np.float64)
    if np.ptp(values) == 0.0:
        value = float(values[0])
        return BootstrapResult(value, value, value, plan.n_resamples, plan.sample_size)
    mean = float(np.mean(values))
    ci_low, ci_high = np.percentile(values, [2.5, 97.5])
    return BootstrapResult(
        mean,
        float(min(ci_low, mean)),
        float(max(ci_high, mean)),
        plan.n_resamples,
        plan.sample_size,
    )


class _ResampleTask:
    """Picklable closure evaluating a metric on one resample of the pools."""

    def __init__(self, metric_fn, pools, plan):
        self.metric_fn = metric_fn
        self.pools = pools
        self.plan = plan

    def __call__(self, resample_index):
        index_lists = resample_pool_indices([len(pool) for pool in self.pools], self.plan, resample_index)
        resampled = [pool[indices] for pool, indices in zip(self.pools, index_lists)]
        return self.metric_fn(*resampled)


def bootstrap_values(metric_fn, pools, plan, workers=1):
    """Evaluates metric_fn(*resampled_pools) on every resample, returning the values in resample order.
    Pools are anything indexable by an integer array (numpy arrays, Dataset)."""
    return ordered_map(_ResampleTask(metric_fn, list(pools), plan), range(plan.n_resamples), workers)


def bootstrap_metric(metric_fn, pools, plan, workers=1):
    """Bootstrap mean and 95% percentile interval of a scalar metric over resampled pools."""
    return summarize_bootstrap(bootstrap_values(metric_fn, pools, plan, workers), plan)
