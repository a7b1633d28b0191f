"""Recursive activation patching (causal tracing, clean to corrupted) and circuit extraction.

Every hidden neuron is scored by the L2 distance between the logits of the corrupted run with that neuron
patched to its clean value and the logits of the clean run. The K neurons per layer with the lowest average
score form the circuit.
"""

import logging
from dataclasses import dataclass

import numpy as np

from circuitforge.bootstrap import resample_pool_indices
from circuitforge.geommlp import PatchSite, forward, forward_patched, forward_traced, model_digest
from circuitforge.profiling import Stopwatch
from circuitforge.settings import SCHEMA_VERSION, default_edge_epsilon, default_k

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogitDiffTable:
    """Mean patched-vs-clean logit distance per hidden layer (one array per hidden layer, in layer order).
    n_forward_passes counts clean traces, corrupted traces and patched passes; n_skipped_sites counts
    (pair, site) combinations answered without a pass because clean and corrupted activations were equal."""

    mean_score: tuple
    n_pairs: int
    n_forward_passes: int = 0
    n_skipped_sites: int = 0

    def to_dict(self):
        return {
            "mean_score": [scores.tolist() for scores in self.mean_score],
            "n_pairs": self.n_pairs,
            "n_forward_passes": self.n_forward_passes,
            "n_skipped_sites": self.n_skipped_sites,
        }


@dataclass(frozen=True)
class Circuit:
    keep: tuple
    k_per_layer: int
    edge_epsilon: float
    edges: tuple
    edge_weights: tuple
    widths: tuple
    layer_spacing: float
    source_model_id: str

    @property
    def total_possible_edges(self):
        return sum(a * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    @property
    def sparsity(self):
        return 1.0 - len(self.edges) / self.total_possible_edges

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "keep": [list(indices) for indices in self.keep],
            "k": self.k_per_layer,
            "edge_epsilon": self.edge_epsilon,
            "edges": [list(edge) for edge in self.edges],
            "edge_weights": list(self.edge_weights),
            "widths": list(self.widths),
            "layer_spacing": self.layer_spacing,
            "source_model_id": self.source_model_id,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            keep = tuple(tuple(int(i) for i in indices) for indices in d["keep"])
            edges = tuple(tuple(int(v) for v in edge) for edge in d["edges"])
            weights = tuple(float(w) for w in d["edge_weights"])
            widths = tuple(int(w) for w in d["widths"])
            circuit = cls(
                keep,
                int(d["k"]),
                float(d["edge_epsilon"]),
                edges,
                weights,
                widths,
                float(d["layer_spacing"]),
                str(d["source_model_id"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"Malformed circuit description: {e}") from e
        if len(edges) != len(weights) or any(len(edge) != 3 for edge in edges):
            raise ValueError("Malformed circuit description: edges and edge_weights disagree")
        if len(keep) != len(widths) - 2:
            raise ValueError("Malformed circuit description: keep lists do not match the hidden layers")
        return circuit


@dataclass(frozen=True)
class DiscoveryReport:
    discovery_time_s: float
    circuit_sparsity: float
    table: LogitDiffTable
    circuit: Circuit

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "discovery_time_s": self.discovery_time_s,
            "circuit_sparsity": self.circuit_sparsity,
            "table": self.table.to_dict(),
            "circuit": self.circuit.to_dict(),
        }


def score_site(model, x_clean, x_corr, site):
    """L2 distance between the corrupted run patched at site and the clean run."""
    clean_trace = forward_traced(model, x_clean)
    patched = forward_patched(model, x_corr, clean_trace, site)
    return float(np.linalg.norm(patched - forward(model, x_clean)))


def score_pair(model, x_clean, x_corr):
    """Scores every hidden site for one pair. Returns (per-layer score arrays, forward passes, skipped sites).
    A site whose clean and corrupted activations are equal is answered by the unpatched corrupted logits,
    which is exactly what the patched pass would produce."""
    clean = forward_traced(model, x_clean)
    corrupted = forward_traced(model, x_corr)
    passes, skipped = 2, 0
    clean_logits = clean.h[-1]
    baseline = float(np.linalg.norm(corrupted.h[-1] - clean_logits))
    scores = []
    for layer in model.spec.hidden_layers:
        layer_scores = np.empty(model.spec.widths[layer])
        same = clean.h[layer] == corrupted.h[layer]
        for neuron in range(model.spec.widths[layer]):
            if same[neuron]:
                layer_scores[neuron] = baseline
                skipped += 1
                continue
            patched = forward_patched(model, x_corr, clean, PatchSite(layer, neuron), corrupted)
            passes += 1
            layer_scores[neuron] = np.linalg.norm(patched - clean_logits)
        scores.append(layer_scores)
    return scores, passes, skipped


def score_all(model, pairs):
    """Averages site scores over (x_clean, x_corr) pairs. Per-pair scores are stacked in pair order before the
    mean, so the reduction order is fixed."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("score_all needs at least one pair")
    per_layer = [[] for _ in model.spec.hidden_layers]
    passes = skipped = 0
    for x_clean, x_corr in pairs:
        scores, n_passes, n_skipped = score_pair(model, x_clean, x_corr)
        passes += n_passes
        skipped += n_skipped
        for stack, layer_scores in zip(per_layer, scores):
            stack.append(layer_scores)
    mean_score = tuple(np.mean(np.stack(stack), axis=0) for stack in per_layer)
    return LogitDiffTable(mean_score, len(pairs), passes, skipped)


def select_top_k(table, k):
    """Per hidden layer, the k neurons with the smallest mean score (ties to the lower index), sorted ascending."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    return [sorted(int(i) for i in np.argsort(scores, kind="stable")[:k]) for scores in table.mean_score]


def extract_circuit(model, keep, k, edge_epsilon=default_edge_epsilon, source_model_id=None):
    """Builds the circuit induced by the kept hidden neurons: every weight with |w| > edge_epsilon whose
    endpoints are kept. Input and output neurons are always kept. Edges are (gap, from, to) triples."""
    spec = model.spec
    hidden = list(spec.hidden_layers)
    if len(keep) != len(hidden):
        raise IndexError(f"Expected {len(hidden)} keep lists, got {len(keep)}")
    kept = [np.ones(spec.widths[0], dtype=bool)]
    for layer, indices in zip(hidden, keep):
        mask = np.zeros(spec.widths[layer], dtype=bool)
        mask[np.asarray(indices, dtype=np.int64)] = True
        if mask.sum() != min(k, spec.widths[layer]):
            raise ValueError(f"Layer {layer} keeps {mask.sum()} neurons, expected min({k}, {spec.widths[layer]})")
        kept.append(mask)
    kept.append(np.ones(spec.widths[-1], dtype=bool))

    edges, weights = [], []
    for gap, w in enumerate(model.weights):
        live = (np.abs(w) > edge_epsilon) & kept[gap + 1][:, None] & kept[gap][None, :]
        # Transposed so edges come out ordered by (from, to)
        for source, target in np.argwhere(live.T):
            edges.append((gap, int(source), int(target)))
            weights.append(float(w[target, source]))
    return Circuit(
        tuple(tuple(int(i) for i in indices) for indices in keep),
        int(k),
        float(edge_epsilon),
        tuple(edges),
        tuple(weights),
        spec.widths,
        spec.layer_spacing,
        model_digest(model) if source_model_id is None else source_model_id,
    )


def discover_pairs(model, clean_pixels, corrupted_pixels, k=default_k, edge_epsilon=default_edge_epsilon, source_model_id=None):
    """Scores, selects and extracts a circuit from aligned arrays of clean and corrupted inputs. The reported
    time covers scoring through extraction."""
    if source_model_id is None:
        source_model_id = model_digest(model)
    with Stopwatch() as clock:
        table = score_all(model, zip(clean_pixels, corrupted_pixels))
        keep = select_top_k(table, k)
        circuit = extract_circuit(model, keep, k, edge_epsilon, source_model_id)
    return DiscoveryReport(clock.elapsed_s, circuit.sparsity, table, circuit)


def discover(model, pair_set, plan, resample_index=0, k=default_k, edge_epsilon=default_edge_epsilon):
    """Runs discovery on one bootstrap resample of a task: the resample draws indices into the clean and the
    corrupted pool from the same stream and pairs them up by position."""
    clean_indices, corrupted_indices = resample_pool_indices(
        [len(pair_set.clean_pool), len(pair_set.corrupted_pool)], plan, resample_index
    )
    report = discover_pairs(
        model,
        pair_set.clean_pool.pixels[clean_indices],
        pair_set.corrupted_pool.pixels[corrupted_indices],
        k,
        edge_epsilon,
    )
    logger.debug(
        "Discovered %s circuit (resample %d): sparsity %.4f in %.3f s",
        pair_set.task_name,
        resample_index,
        report.circuit_sparsity,
        report.discovery_time_s,
    )
    return report
