import numpy as np
import pytest
from scipy.special import expit

from circuitforge.bootstrap import BootstrapPlan
from circuitforge.geommlp import GeomMlp, LayerSpec, PatchSite, forward_traced
from circuitforge import patching
from circuitforge.mnistdata import build_pair_set
from circuitforge.patching import (
    Circuit,
    LogitDiffTable,
    discover,
    discover_pairs,
    extract_circuit,
    score_all,
    score_site,
    select_top_k,
)


def oracle_forward(model, x, patch=None):
    """Forward pass from scratch; patch is (layer, neuron, value) applied to that post-activation."""
    hs = [x]
    h = x
    for gap in range(model.spec.n_gaps):
        z = h @ model.weights[gap].T + model.biases[gap]
        h = z if gap == model.spec.n_gaps - 1 else z * expit(z)
        if patch is not None and gap + 1 == patch[0]:
            h = h.copy()
            h[patch[1]] = patch[2]
        hs.append(h)
    return hs


def oracle_scores(model, pairs):
    per_pair = []
    for x_clean, x_corr in pairs:
        clean = oracle_forward(model, x_clean)
        scores = []
        for layer in model.spec.hidden_layers:
            layer_scores = np.empty(model.spec.widths[layer])
            for neuron in range(model.spec.widths[layer]):
                patched = oracle_forward(model, x_corr, (layer, neuron, clean[layer][neuron]))[-1]
                layer_scores[neuron] = np.linalg.norm(patched - clean[-1])
            scores.append(layer_scores)
        per_pair.append(scores)
    return [np.mean(np.stack([scores[i] for scores in per_pair]), axis=0) for i in range(len(per_pair[0]))]


@pytest.fixture
def toy_pairs():
    rng = np.random.default_rng(21)
    return list(zip(rng.uniform(size=(5, 8)), rng.uniform(size=(5, 8))))


def test_scores_match_brute_force_patching(toy_model, toy_pairs):
    model = toy_model((8, 4, 4, 2), seed=5)
    table = score_all(model, toy_pairs)
    expected = oracle_scores(model, toy_pairs)
    assert table.n_pairs == 5
    for got, want in zip(table.mean_score, expected):
        np.testing.assert_array_equal(got, want)


def test_circuit_matches_brute_force_selection(toy_model, toy_pairs):
    model = toy_model((8, 4, 4, 2), seed=5)
    expected_scores = oracle_scores(model, toy_pairs)
    expected_keep = [sorted(sorted(range(4), key=lambda i: (scores[i], i))[:2]) for scores in expected_scores]
    report = discover_pairs(model, [p[0] for p in toy_pairs], [p[1] for p in toy_pairs], k=2, edge_epsilon=0.0)
    assert [list(keep) for keep in report.circuit.keep] == expected_keep

    kept = [set(range(8))] + [set(keep) for keep in expected_keep] + [set(range(2))]
    expected_edges = [
        (gap, source, target)
        for gap, w in enumerate(model.weights)
        for source in range(w.shape[1])
        for target in range(w.shape[0])
        if source in kept[gap] and target in kept[gap + 1] and abs(w[target, source]) > 0.0
    ]
    assert list(report.circuit.edges) == expected_edges
    assert report.circuit_sparsity == pytest.approx(1 - len(expected_edges) / model.spec.total_edges)
    for (gap, source, target), weight in zip(report.circuit.edges, report.circuit.edge_weights):
        assert weight == model.weights[gap][target, source]


def test_identical_inputs_score_zero(toy_model):
    model = toy_model()
    x = np.random.default_rng(0).uniform(size=8)
    table = score_all(model, [(x, x)])
    for scores in table.mean_score:
        assert not np.any(scores)


def test_single_site_score_agrees_with_table(toy_model, toy_pairs):
    model = toy_model()
    x_clean, x_corr = toy_pairs[0]
    table = score_all(model, [toy_pairs[0]])
    assert score_site(model, x_clean, x_corr, PatchSite(2, 1)) == table.mean_score[1][1]


def test_forward_pass_accounting(monkeypatch):
    rng = np.random.default_rng(7)
    spec = LayerSpec((6, 5, 5, 3))
    # Negative biases leave some ReLU neurons dead for both inputs, so their sites need no pass
    weights = [rng.normal(size=(5, 6)), rng.normal(size=(5, 5)), rng.normal(size=(3, 5))]
    biases = [np.array([0.0, -50.0, 0.0, -50.0, 0.0]), np.array([-50.0, 0.0, 0.0, 0.0, -50.0]), np.zeros(3)]
    model = GeomMlp(spec, weights, biases, "relu")
    pairs = list(zip(rng.uniform(size=(4, 6)), rng.uniform(size=(4, 6))))
    calls = {"traced": 0, "patched": 0}

    def counted(name, fn):
        def wrapper(*args, **kwargs):
            calls[name] += 1
            return fn(*args, **kwargs)

        return wrapper

    monkeypatch.setattr(patching, "forward_traced", counted("traced", patching.forward_traced))
    monkeypatch.setattr(patching, "forward_patched", counted("patched", patching.forward_patched))
    table = score_all(model, pairs)
    monkeypatch.undo()
    differing = 0
    for x_clean, x_corr in pairs:
        clean, corrupted = forward_traced(model, x_clean), forward_traced(model, x_corr)
        differing += sum(int(np.sum(clean.h[layer] != corrupted.h[layer])) for layer in spec.hidden_layers)
    assert table.n_skipped_sites > 0
    assert calls == {"traced": 2 * len(pairs), "patched": differing}
    assert table.n_forward_passes == 2 * len(pairs) + differing
    assert table.n_forward_passes + table.n_skipped_sites == 2 * len(pairs) + len(pairs) * 10


def test_duplicated_pairs_keep_the_mean(toy_model, toy_pairs):
    model = toy_model()
    once = score_all(model, toy_pairs)
    twice = score_all(model, toy_pairs + toy_pairs)
    for a, b in zip(once.mean_score, twice.mean_score):
        np.testing.assert_allclose(a, b, rtol=1e-12)


def test_select_top_k_breaks_ties_to_lower_index():
    table = LogitDiffTable((np.array([0.5, 0.1, 0.1, 0.9]), np.array([0.2, 0.2, 0.2, 0.2])), n_pairs=1)
    assert select_top_k(table, 2) == [[1, 2], [0, 1]]
    assert select_top_k(table, 10) == [[0, 1, 2, 3], [0, 1, 2, 3]]
    with pytest.raises(ValueError):
        select_top_k(table, 0)


def test_select_top_k_against_sort():
    rng = np.random.default_rng(3)
    scores = rng.integers(0, 5, size=30).astype(float)
    table = LogitDiffTable((scores,), n_pairs=1)
    expected = sorted(sorted(range(30), key=lambda i: (scores[i], i))[:7])
    assert select_top_k(table, 7) == [expected]


def test_dense_model_with_everything_kept():
    model = GeomMlp.init_random(LayerSpec(), seed=0)
    circuit = extract_circuit(model, [range(100), range(100)], k=100, edge_epsilon=0.0)
    assert len(circuit.edges) == 89400
    assert circuit.sparsity == 0.0


def test_single_kept_neuron_bounds_the_edges():
    model = GeomMlp.init_random(LayerSpec(), seed=0)
    circuit = extract_circuit(model, [[17], [3]], k=1, edge_epsilon=0.0)
    assert len(circuit.edges) == 784 + 1 + 10
    assert circuit.sparsity == pytest.approx(1 - 795 / 89400)


def test_sparsity_grows_with_epsilon_and_shrinking_k(toy_model):
    model = toy_model((16, 8, 8, 4), seed=9)
    keep_small, keep_large = [[0, 1, 2], [3, 4, 5]], [[0, 1, 2, 6, 7], [1, 3, 4, 5, 6]]
    epsilons = [0.0, 0.05, 0.1, 0.2, 0.5]
    sparsities = [extract_circuit(model, keep_large, 5, eps).sparsity for eps in epsilons]
    assert sparsities == sorted(sparsities)
    small = extract_circuit(model, keep_small, 3, 0.0)
    large = extract_circuit(model, keep_large, 5, 0.0)
    assert small.sparsity >= large.sparsity


def test_circuit_edges_have_kept_endpoints(toy_model):
    model = toy_model((16, 8, 8, 4), seed=9)
    circuit = extract_circuit(model, [[0, 5], [2, 7]], 2, 0.1)
    kept = [set(range(16)), {0, 5}, {2, 7}, set(range(4))]
    for (gap, source, target), weight in zip(circuit.edges, circuit.edge_weights):
        assert source in kept[gap] and target in kept[gap + 1]
        assert abs(weight) > 0.1


def test_keep_size_must_match_k(toy_model):
    with pytest.raises(ValueError):
        extract_circuit(toy_model(), [[0], [1, 2]], k=2)
    with pytest.raises(IndexError):
        extract_circuit(toy_model(), [[0, 1]], k=2)


def test_discover_is_deterministic(toy_model, toy_dataset):
    model = toy_model((36, 8, 8, 10), seed=1)
    pairs = build_pair_set(toy_dataset, 8, 3, "circle")
    plan = BootstrapPlan(n_resamples=3, sample_size=6, seed=2)
    first = discover(model, pairs, plan, resample_index=1, k=3)
    second = discover(model, pairs, plan, resample_index=1, k=3)
    assert first.circuit == second.circuit
    for a, b in zip(first.table.mean_score, second.table.mean_score):
        np.testing.assert_array_equal(a, b)
    assert first.table.n_pairs == 6
    assert discover(model, pairs, plan, resample_index=2, k=3).table.mean_score[0].tolist() != first.table.mean_score[0].tolist()


def test_circuit_description_round_trip(toy_model):
    circuit = extract_circuit(toy_model(), [[0, 1], [2, 3]], 2, 0.0, source_model_id="abc")
    assert Circuit.from_dict(circuit.to_dict()) == circuit
    assert circuit.to_dict()["schema_version"] == 1


@pytest.mark.parametrize(
    "mangle",
    [
        lambda d: d.pop("edges"),
        lambda d: d.update(edge_weights=[]),
        lambda d: d.update(keep=[[0, 1]]),
        lambda d: d.update(k="many"),
    ],
)
def test_malformed_circuit_description(toy_model, mangle):
    d = extract_circuit(toy_model(), [[0, 1], [2, 3]], 2, 0.0, source_model_id="abc").to_dict()
    mangle(d)
    with pytest.raises(ValueError):
        Circuit.from_dict(d)
