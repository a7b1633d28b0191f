import numpy as np
import pytest
from scipy.special import expit

from circuitforge.bootstrap import BootstrapPlan
from circuitforge.errors import ConfigurationError
from circuitforge.evaluate import (
    build_table2,
    circuit_accuracy,
    circuit_logit_difference,
    discovery_work_law,
    inference_timing,
)
from circuitforge.geommlp import GeomMlp, LayerSpec
from circuitforge.mnistdata import build_pair_set
from circuitforge.patching import extract_circuit
from circuitforge.save import TABLE2_COLUMNS
from circuitforge.train import TrainReport


def masked_oracle(model, x, keep):
    h = x
    for gap in range(model.spec.n_gaps):
        z = h @ model.weights[gap].T + model.biases[gap]
        if gap == model.spec.n_gaps - 1:
            return z
        h = z * expit(z)
        h = np.array([value if i in keep[gap] else 0.0 for i, value in enumerate(h)])


def test_identity_circuit_has_zero_logit_difference(toy_model):
    model = toy_model((16, 8, 8, 4))
    circuit = extract_circuit(model, [range(8), range(8)], 8, 0.0, "m")
    x = np.random.default_rng(0).uniform(size=(10, 16))
    assert circuit_logit_difference(model, circuit, x) == 0.0


def test_logit_difference_against_explicit_ablation(toy_model):
    model = toy_model((16, 8, 8, 4), seed=4)
    keep = [[1, 4, 6], [0, 2, 3]]
    circuit = extract_circuit(model, keep, 3, 0.0, "m")
    x = np.random.default_rng(1).uniform(size=(7, 16))
    full = [masked_oracle(model, sample, [range(8), range(8)]) for sample in x]
    ablated = [masked_oracle(model, sample, keep) for sample in x]
    expected = np.mean([np.linalg.norm(a - b) for a, b in zip(full, ablated)])
    assert circuit_logit_difference(model, circuit, x) == pytest.approx(expected, rel=1e-10)


def test_circuit_accuracy_on_single_samples():
    model = GeomMlp.zeros(LayerSpec((2, 2, 3)))
    model.biases[-1][:] = [0.0, 5.0, 1.0]
    circuit = extract_circuit(model, [[0]], 1, 0.0, "m")
    x = np.zeros((1, 2))
    assert circuit_accuracy(model, circuit, x, [1]) == 1.0
    assert circuit_accuracy(model, circuit, x, [2]) == 0.0


def test_inference_timing_is_positive(toy_model):
    model = toy_model((16, 8, 8, 4))
    plan = BootstrapPlan(n_resamples=4, sample_size=10)
    result = inference_timing(model, np.random.default_rng(0).uniform(size=(20, 16)), plan, warmup=5)
    assert 0 < result.ci_low <= result.mean <= result.ci_high
    assert result.n_resamples == 4


@pytest.fixture
def regime_models(toy_model):
    labels = ["FullyDense", "L1Only", "L1Local", "L1Swap", "BIMT"]
    return {label: toy_model((36, 6, 6, 10), seed=seed) for seed, label in enumerate(labels)}


def test_comparison_table_layout(regime_models, toy_dataset):
    tasks = [build_pair_set(toy_dataset, 8, 3, "circle"), build_pair_set(toy_dataset, 4, 9, "straight_line")]
    plan = BootstrapPlan(n_resamples=3, sample_size=4, seed=1)
    reports = {label: TrainReport(label, wall_time_s=1.5, peak_alloc_bytes=10, model_file_bytes=20) for label in regime_models}
    rows, compute = build_table2(regime_models, tasks, plan, k=2, edge_epsilon=0.0, train_reports=reports)
    assert [(row.task_name, row.regime) for row in rows] == [
        (task.task_name, label) for task in tasks for label in regime_models
    ]
    for row in rows:
        assert list(row.to_csv_record()) == TABLE2_COLUMNS
        for result in (row.logit_difference, row.discovery_time_s, row.circuit_sparsity, row.circuit_accuracy):
            assert result.ci_low <= result.mean <= result.ci_high
        assert 0.0 <= row.circuit_sparsity.mean <= 1.0
        assert row.discovery_time_s.mean > 0
    assert [c.regime for c in compute] == list(regime_models)
    assert compute[0].training_time_s == 1.5
    assert compute[0].inference_time_per_sample_s.mean > 0


def test_table_without_reports_skips_compute_rows(regime_models, toy_dataset):
    tasks = [build_pair_set(toy_dataset, 1, 7, "custom")]
    rows, compute = build_table2(regime_models, tasks, BootstrapPlan(2, 3), k=1)
    assert len(rows) == 5 and compute == []


def test_table_is_reproducible_apart_from_timing(regime_models, toy_dataset, caplog):
    tasks = [build_pair_set(toy_dataset, 8, 3, "circle")]
    plan = BootstrapPlan(n_resamples=3, sample_size=4, seed=5)
    serial, _ = build_table2(regime_models, tasks, plan, k=2)
    assert "concurrent workers" not in caplog.text
    parallel, _ = build_table2(regime_models, tasks, plan, k=2, workers=2)
    assert "concurrent workers" in caplog.text
    for a, b in zip(serial, parallel):
        assert a.logit_difference == b.logit_difference
        assert a.circuit_sparsity == b.circuit_sparsity
        assert a.circuit_accuracy == b.circuit_accuracy


def test_models_must_share_a_spec(regime_models, toy_model, toy_dataset):
    regime_models["BIMT"] = toy_model((36, 7, 7, 10))
    with pytest.raises(ConfigurationError):
        build_table2(regime_models, [build_pair_set(toy_dataset, 8, 3, "circle")], BootstrapPlan(2, 3))


@pytest.mark.slow
def test_discovery_time_is_linear_in_scored_sites():
    law = discovery_work_law(hidden_widths=(25, 50, 100), n_pairs=20, repeats=3)
    assert law["slope_s_per_site"] > 0
    assert law["r_squared"] >= 0.95
