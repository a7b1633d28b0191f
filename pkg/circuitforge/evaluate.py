"""Circuit quality and compute metrics with bootstrap confidence intervals."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import linregress

from circuitforge.bootstrap import bootstrap_resample, bootstrap_values, summarize_bootstrap
from circuitforge.errors import ConfigurationError
from circuitforge.geommlp import GeomMlp, LayerSpec, forward, forward_masked, keep_masks, model_digest
from circuitforge.patching import discover_pairs
from circuitforge.profiling import Stopwatch
from circuitforge.rng import named_rng
from circuitforge.settings import default_edge_epsilon, default_k, inference_warmup

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricRow:
    task_name: str
    regime: str
    logit_difference: object
    discovery_time_s: object
    circuit_sparsity: object
    circuit_accuracy: object = None

    def to_csv_record(self):
        record = {"task": self.task_name, "regime": self.regime}
        for prefix, result in (
            ("logit_diff", self.logit_difference),
            ("discovery_time", self.discovery_time_s),
            ("sparsity", self.circuit_sparsity),
        ):
            record[f"{prefix}_mean"] = result.mean
            record[f"{prefix}_ci_low"] = result.ci_low
            record[f"{prefix}_ci_high"] = result.ci_high
        return record

    def to_dict(self):
        d = {
            "task": self.task_name,
            "regime": self.regime,
            "logit_difference": self.logit_difference.to_dict(),
            "discovery_time_s": self.discovery_time_s.to_dict(),
            "circuit_sparsity": self.circuit_sparsity.to_dict(),
        }
        if self.circuit_accuracy is not None:
            d["circuit_accuracy"] = self.circuit_accuracy.to_dict()
        return d


@dataclass(frozen=True)
class ComputeRow:
    regime: str
    training_time_s: float
    peak_alloc_bytes: int
    model_file_bytes: int
    inference_time_per_sample_s: object

    def to_dict(self):
        return {
            "regime": self.regime,
            "training_time_s": self.training_time_s,
            "peak_alloc_bytes": self.peak_alloc_bytes,
            "model_file_bytes": self.model_file_bytes,
            "inference_time_per_sample_s": self.inference_time_per_sample_s.to_dict(),
        }


def _pixels(samples):
    return getattr(samples, "pixels", samples)


def circuit_logit_difference(model, circuit, samples):
    """Mean L2 distance between the full model's logits and the circuit's (zero-ablated) logits."""
    x = np.atleast_2d(_pixels(samples))
    if len(x) == 0:
        raise ValueError("circuit_logit_difference needs at least one sample")
    masks = keep_masks(model.spec, circuit.keep)
    return float(np.mean(np.linalg.norm(forward(model, x) - forward_masked(model, x, masks), axis=1)))


def circuit_accuracy(model, circuit, pixels, labels):
    """Fraction of samples whose argmax circuit logit equals the label."""
    x = np.atleast_2d(pixels)
    labels = np.atleast_1d(labels)
    masks = keep_masks(model.spec, circuit.keep)
    return float(np.mean(np.argmax(forward_masked(model, x, masks), axis=1) == labels))


def inference_timing(model, samples, plan, warmup=inference_warmup):
    """Mean wall time of one single-sample forward pass, bootstrapped over resamples of samples. The first
    warmup passes are discarded. Always runs serially."""
    x = np.atleast_2d(_pixels(samples))
    for i in range(warmup):
        forward(model, x[i % len(x)])
    per_sample = []
    for r in range(plan.n_resamples):
        batch = x[bootstrap_resample(len(x), plan, r)]
        with Stopwatch() as clock:
            for sample in batch:
                forward(model, sample)
        per_sample.append(clock.elapsed_s / len(batch))
    return summarize_bootstrap(per_sample, plan)


class DiscoveryMetrics:
    """Picklable metric function for one (model, task): runs discovery on a resample of aligned clean and
    corrupted pools and measures the circuit on the union of both."""

    def __init__(self, model, k, edge_epsilon):
        self.model = model
        self.k = k
        self.edge_epsilon = edge_epsilon
        self.model_id = model_digest(model)

    def __call__(self, clean, corrupted):
        report = discover_pairs(self.model, clean.pixels, corrupted.pixels, self.k, self.edge_epsilon, self.model_id)
        union = np.concatenate([clean.pixels, corrupted.pixels])
        labels = np.concatenate([clean.labels, corrupted.labels])
        return (
            circuit_logit_difference(self.model, report.circuit, union),
            report.discovery_time_s,
            report.circuit_sparsity,
            circuit_accuracy(self.model, report.circuit, union, labels),
        )


def check_same_spec(models):
    """All compared models must share one layer spec and activation."""
    specs = {(model.spec, model.activation) for model in models.values()}
    if len(specs) != 1:
        raise ConfigurationError(f"Models disagree on spec/activation: {sorted(map(str, specs))}")


def task_metric_row(model, regime_label, pair_set, plan, k=default_k, edge_epsilon=default_edge_epsilon, workers=1):
    """Bootstraps discovery on one task; all metrics of a resample come from the same drawn pairs."""
    metric_fn = DiscoveryMetrics(model, k, edge_epsilon)
    values = np.array(bootstrap_values(metric_fn, [pair_set.clean_pool, pair_set.corrupted_pool], plan, workers))
    logit_diff, time_s, sparsity, acc = (summarize_bootstrap(values[:, c], plan) for c in range(4))
    return MetricRow(pair_set.task_name, regime_label, logit_diff, time_s, sparsity, acc)


def build_table2(models, tasks, plan, k=default_k, edge_epsilon=default_edge_epsilon, train_reports=None, timing_samples=None, workers=1):
    """Runs the full comparison. models maps regime label to model, tasks is a list of TaskPairSet. Returns
    (metric rows ordered by task then regime, compute rows ordered by regime). Compute rows need train_reports
    (regime label to TrainReport) and are skipped otherwise."""
    check_same_spec(models)
    if workers > 1:
        logger.warning("Discovery times are measured inside %d concurrent workers; compare time CIs only at workers=1", workers)
    metric_rows = []
    for pair_set in tasks:
        for label, model in models.items():
            row = task_metric_row(model, label, pair_set, plan, k, edge_epsilon, workers)
            logger.info(
                "%s / %s: logit diff %.4f, time %.3f s, sparsity %.4f, accuracy %.4f",
                pair_set.task_name,
                label,
                row.logit_difference.mean,
                row.discovery_time_s.mean,
                row.circuit_sparsity.mean,
                row.circuit_accuracy.mean,
            )
            metric_rows.append(row)

    compute_rows = []
    if train_reports is not None:
        if timing_samples is None:
            timing_samples = np.concatenate([tasks[0].clean_pool.pixels, tasks[0].corrupted_pool.pixels])
        for label, model in models.items():
            report = train_reports[label]
            compute_rows.append(
                ComputeRow(
                    label,
                    report.wall_time_s,
                    report.peak_alloc_bytes,
                    report.model_file_bytes,
                    inference_timing(model, timing_samples, plan),
                )
            )
    return metric_rows, compute_rows


def discovery_work_law(hidden_widths=(25, 50, 100), n_pairs=20, repeats=3, seed=0, input_dim=784, n_classes=10, activation="silu"):
    """Measures discovery time against the number of scored sites needing a forward pass across random models
    of different hidden widths, and fits a line. Returns slope, intercept, r_squared and the raw points."""
    rng = named_rng(seed, "pairing")
    clean = rng.uniform(0.0, 1.0, size=(n_pairs, input_dim))
    corrupted = rng.uniform(0.0, 1.0, size=(n_pairs, input_dim))
    points = []
    for width in hidden_widths:
        model = GeomMlp.init_random(LayerSpec((input_dim, width, width, n_classes)), seed, activation)
        model_id = model_digest(model)
        for _ in range(repeats):
            report = discover_pairs(model, clean, corrupted, k=1, source_model_id=model_id)
            table = report.table
            scored = table.n_forward_passes - 2 * table.n_pairs
            points.append({"hidden_width": width, "scored_sites": scored, "discovery_time_s": report.discovery_time_s})
    fit = linregress([p["scored_sites"] for p in points], [p["discovery_time_s"] for p in points])
    return {
        "slope_s_per_site": float(fit.slope),
        "intercept_s": float(fit.intercept),
        "r_squared": float(fit.rvalue**2),
        "points": points,
    }
