import json
import logging
from pathlib import Path

import pandas as pd
import pydot

from circuitforge.settings import SCHEMA_VERSION

logger = logging.getLogger(__name__)

TABLE2_COLUMNS = [
    "task",
    "regime",
    "logit_diff_mean",
    "logit_diff_ci_low",
    "logit_diff_ci_high",
    "discovery_time_mean",
    "discovery_time_ci_low",
    "discovery_time_ci_high",
    "sparsity_mean",
    "sparsity_ci_low",
    "sparsity_ci_high",
]

# Edge count above which rendering warns about the output size
LARGE_DOT_EDGES = 10000
# DOT positions are in points
X_SCALE = 1000.0
Y_SCALE = 300.0


def _with_suffix(file_name, suffix):
    path = Path(file_name)
    if path.suffix != suffix:
        path = path.with_name(path.name + suffix)
    return path


def save_json(data, file_name):
    """Writes a report as JSON, appending the .json extension if needed and stamping schema_version."""
    path = _with_suffix(file_name, ".json")
    if isinstance(data, dict) and "schema_version" not in data:
        data = {"schema_version": SCHEMA_VERSION, **data}
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    return path


def load_json(file_name):
    with open(file_name) as f:
        return json.load(f)


def save_table_csv(records, file_name, columns=TABLE2_COLUMNS):
    """Writes flat records as CSV with exactly the given columns, appending .csv if needed."""
    path = _with_suffix(file_name, ".csv")
    pd.DataFrame.from_records(records, columns=columns).to_csv(path, index=False)
    return path


def save_plot_data(table_rows, out_dir):
    """Writes the (sparsity, logit difference) and (sparsity, discovery time) point files, with their CI bounds,
    from table2 rows as stored in table2.json."""
    out_dir = Path(out_dir)
    frame = pd.DataFrame.from_records(
        [
            {
                "task": row["task"],
                "regime": row["regime"],
                "sparsity": row["circuit_sparsity"]["mean"],
                "sparsity_ci_low": row["circuit_sparsity"]["ci_low"],
                "sparsity_ci_high": row["circuit_sparsity"]["ci_high"],
                "logit_diff": row["logit_difference"]["mean"],
                "logit_diff_ci_low": row["logit_difference"]["ci_low"],
                "logit_diff_ci_high": row["logit_difference"]["ci_high"],
                "time": row["discovery_time_s"]["mean"],
                "time_ci_low": row["discovery_time_s"]["ci_low"],
                "time_ci_high": row["discovery_time_s"]["ci_high"],
            }
            for row in table_rows
        ]
    )
    base = ["task", "regime", "sparsity", "sparsity_ci_low", "sparsity_ci_high"]
    logit_path = out_dir / "sparsity_vs_logit_diff.csv"
    time_path = out_dir / "sparsity_vs_time.csv"
    frame[base + ["logit_diff", "logit_diff_ci_low", "logit_diff_ci_high"]].to_csv(logit_path, index=False)
    frame[base + ["time", "time_ci_low", "time_ci_high"]].to_csv(time_path, index=False)
    return [logit_path, time_path]


def _node_name(layer, neuron):
    return f"L{layer}_{neuron}"


def circuit_to_dot(circuit):
    """Graph of the circuit with neurons pinned at their grid coordinates. Edge colour and the sign attribute
    follow the sign of the weight (red positive, blue negative); pen width follows its magnitude."""
    graph = pydot.Dot("circuit", graph_type="digraph", splines="false")
    widths = circuit.widths
    kept = [range(widths[0])] + [list(indices) for indices in circuit.keep] + [range(widths[-1])]
    for layer, neurons in enumerate(kept):
        y = layer * circuit.layer_spacing * Y_SCALE
        for neuron in neurons:
            x = (neuron + 0.5) / widths[layer] * X_SCALE
            graph.add_node(
                pydot.Node(_node_name(layer, neuron), pos=f'"{x:.3f},{y:.3f}!"', shape="point")
            )
    max_weight = max((abs(w) for w in circuit.edge_weights), default=1.0) or 1.0
    for (gap, source, target), weight in zip(circuit.edges, circuit.edge_weights):
        graph.add_edge(
            pydot.Edge(
                _node_name(gap, source),
                _node_name(gap + 1, target),
                color="red" if weight > 0 else "blue",
                sign="+" if weight > 0 else "-",
                magnitude=f"{abs(weight):.6g}",
                penwidth=f"{0.2 + 2.8 * abs(weight) / max_weight:.3f}",
            )
        )
    return graph


def save_circuit_dot(circuit, file_name):
    """Writes the circuit graph as DOT source, appending the .dot extension if needed."""
    path = _with_suffix(file_name, ".dot")
    if len(circuit.edges) > LARGE_DOT_EDGES:
        logger.warning("Circuit has %d edges, the DOT file will be large", len(circuit.edges))
    with open(path, "w") as f:
        f.write(circuit_to_dot(circuit).to_string())
    return path
